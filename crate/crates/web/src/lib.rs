//! Browser demo: decomposition of one simulated image, ROC metrics over
//! pasted scores, and a small end-to-end train-and-score run.
//!
//! Every export returns a JSON string; failures come back as `{"error": ...}`.

use serde_json::{json, Value};
use tagood::centers::CenterBank;
use tagood::decompose::{decompose_record, normalize_attention, DecompositionConfig, IndVocab};
use tagood::metrics;
use tagood::score::{self, Detector, Metric};
use tagood::sim::{self, Concept, World, WorldConfig};
use tagood::store::Split;
use tagood::train::{self, TrainConfig};
use wasm_bindgen::prelude::*;

fn small_world(seed: u64) -> WorldConfig {
    WorldConfig {
        k_ind: 4,
        k_ood: 4,
        n_nuisance: 3,
        d: 16,
        objects_max: 2,
        n_train: 400,
        n_test_ind: 150,
        n_test_ood: 150,
        seed,
        ..WorldConfig::default()
    }
}

fn ind_vocab(world: &World) -> IndVocab {
    let tags = (0..world.config.k_ind).map(|c| world.tag(Concept::Ind(c))).collect();
    IndVocab::new(tags).expect("distinct tags")
}

fn render(v: Result<Value, String>) -> String {
    v.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

fn cells(list: &[(u32, u32)]) -> Value {
    list.iter().map(|&(r, c)| json!([r, c])).collect()
}

/// Decomposes record `index` of a split (`"ind"` or `"ood"`) at threshold `tau`.
#[wasm_bindgen]
pub fn decompose(seed: u32, index: u32, split: &str, tau: f32, attention_noise: f64) -> String {
    render(decompose_impl(seed as u64, index as usize, split, tau, attention_noise))
}

fn decompose_impl(seed: u64, index: usize, split: &str, tau: f32, noise: f64) -> Result<Value, String> {
    let split = match split {
        "ood" => Split::TestOod,
        _ => Split::TestInd,
    };
    let cfg = WorldConfig { attention_noise: noise, ..small_world(seed) };
    let world = sim::make_world(&cfg).map_err(|e| e.to_string())?;
    let vocab = ind_vocab(&world);
    let (record, truth) = sim::sample_record(&world, split, index).map_err(|e| e.to_string())?;
    let names: std::collections::BTreeMap<u32, String> = world.tag_names().into_iter().collect();
    let tags: Vec<Value> = record
        .tags
        .iter()
        .map(|t| {
            let att = normalize_attention(&t.attention);
            json!({
                "name": names.get(&t.tag_id).cloned().unwrap_or_default(),
                "ind": vocab.contains_tag(t.tag_id),
                "confidence": t.confidence,
                "attention": att.iter().copied().collect::<Vec<f32>>(),
            })
        })
        .collect();
    let dcfg = DecompositionConfig { tau, ..DecompositionConfig::default() };
    let selected = decompose_record(&record, &vocab, &dcfg).map(|s| s.locations).unwrap_or_default();
    let objects: Vec<Value> = truth
        .objects
        .iter()
        .map(|o| {
            let kind = match o.concept {
                Concept::Ind(_) => "ind",
                Concept::Ood(_) => "ood",
                Concept::Nuisance(_) => "nuisance",
            };
            json!({ "kind": kind, "name": names.get(&o.tag_id).cloned().unwrap_or_default(),
                    "cells": cells(&truth.object_cells(|x| x == o)) })
        })
        .collect();
    let (h, w) = record.grid();
    Ok(json!({
        "id": record.id,
        "h": h,
        "w": w,
        "tags": tags,
        "selected": cells(&selected),
        "objects": objects,
        "rejected": selected.is_empty(),
    }))
}

fn parse_scores(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect()
}

/// AUROC, FPR95 and the step ROC curve of two pasted score lists.
#[wasm_bindgen]
pub fn roc(ind: &str, ood: &str) -> String {
    render(roc_impl(ind, ood))
}

fn roc_value(ind: &[f64], ood: &[f64]) -> Result<Value, String> {
    let r = metrics::evaluate(ind, ood).map_err(|e| e.to_string())?;
    let mut thresholds: Vec<f64> = ind.iter().chain(ood).copied().collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let rate = |xs: &[f64], t: f64| xs.iter().filter(|&&s| s >= t).count() as f64 / xs.len() as f64;
    let mut curve = vec![json!([0.0, 0.0])];
    curve.extend(thresholds.iter().map(|&t| json!([rate(ood, t), rate(ind, t)])));
    Ok(json!({
        "auroc": r.auroc,
        "fpr95": r.fpr95,
        // JSON has no infinities
        "threshold": if r.threshold_at_95.is_finite() { json!(r.threshold_at_95) } else { json!(r.threshold_at_95.to_string()) },
        "n_ind": r.n_ind,
        "n_ood": r.n_ood,
        "curve": curve,
    }))
}

fn roc_impl(ind: &str, ood: &str) -> Result<Value, String> {
    roc_value(&parse_scores(ind)?, &parse_scores(ood)?)
}

/// Trains on a small simulated world and evaluates the chosen metric against
/// the tag-score and raw mean-center baselines.
#[wasm_bindgen]
pub fn train_demo(seed: u32, epochs: u32, tau: f32, metric: &str) -> String {
    render(train_impl(seed as u64, epochs as usize, tau, metric))
}

fn split_scores(world: &World, vocab: &IndVocab, detector: &Detector<'_>, dcfg: &DecompositionConfig) -> Result<(Vec<f64>, Vec<f64>), String> {
    let mut out = (Vec::new(), Vec::new());
    for split in [Split::TestInd, Split::TestOod] {
        for i in 0..sim::split_size(&world.config, split) {
            let (record, _) = sim::sample_record(world, split, i).map_err(|e| e.to_string())?;
            let s = score::score_record(&record, split, vocab, detector, dcfg).map_err(|e| e.to_string())?;
            if split.is_ind() { out.0.push(s.score) } else { out.1.push(s.score) }
        }
    }
    Ok(out)
}

fn train_impl(seed: u64, epochs: usize, tau: f32, metric: &str) -> Result<Value, String> {
    let metric: Metric = metric.parse()?;
    let world = sim::make_world(&small_world(seed)).map_err(|e| e.to_string())?;
    let vocab = ind_vocab(&world);
    let cfg = TrainConfig { epochs: epochs.max(1), tau, width: 32, batch_size: 64, seed, ..TrainConfig::default() };
    let dcfg = cfg.decomposition();
    let mut samples = Vec::new();
    for i in 0..world.config.n_train {
        let (record, _) = sim::sample_record(&world, Split::Train, i).map_err(|e| e.to_string())?;
        samples.extend(decompose_record(&record, &vocab, &dcfg));
    }
    let k = vocab.num_classes();
    let (state, stats) = train::train_samples(&samples, k, &cfg).map_err(|e| e.to_string())?;
    let raw: CenterBank = score::mean_center_baseline(&samples, k).map_err(|e| e.to_string())?;

    let detectors = [
        (metric.as_str(), Detector::Projected { params: &state.params, centers: &state.bank, metric }),
        ("mean_cs", Detector::RawMeanCenters { centers: &raw }),
        ("tag_score", Detector::TagScore),
    ];
    let mut rows = Vec::new();
    for (name, detector) in &detectors {
        let (ind, ood) = split_scores(&world, &vocab, detector, &dcfg)?;
        let mut row = roc_value(&ind, &ood)?;
        row["variant"] = json!(name);
        rows.push(row);
    }
    Ok(json!({
        "train_samples": samples.len(),
        "loss": stats.iter().map(|s| s.total).collect::<Vec<f64>>(),
        "results": rows,
    }))
}
