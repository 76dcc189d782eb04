//! Trains the full, CE-only and tau=0 variants on one benchmark world and
//! prints a one-line summary. World knobs come from env vars (AN, MISS, FALSE,
//! CONF, AFF, OMIN, OMAX, SMIN, SMAX, MODES, EPOCHS).
//!
//! cargo run --release --example bench -- <seed>

use std::env;
use tagood::decompose::*;
use tagood::metrics::evaluate;
use tagood::score::*;
use tagood::sim::*;
use tagood::store::{FeatureRecord, Split};
use tagood::train::*;

fn var<T: std::str::FromStr>(name: &str, default: T) -> T {
    env::var(name).ok().map_or(default, |v| v.parse().ok().unwrap())
}

fn main() {
    let seed: u64 = env::args().nth(1).map_or(0, |s| s.parse().unwrap());
    let d = WorldConfig::default();
    let wc = WorldConfig {
        seed,
        attention_noise: var("AN", d.attention_noise),
        tag_miss_rate: var("MISS", d.tag_miss_rate),
        false_tag_rate: var("FALSE", d.false_tag_rate),
        ood_confusion_rate: var("CONF", d.ood_confusion_rate),
        background_affinity: var("AFF", d.background_affinity),
        objects_min: var("OMIN", d.objects_min),
        objects_max: var("OMAX", d.objects_max),
        object_side_min: var("SMIN", d.object_side_min),
        object_side_max: var("SMAX", d.object_side_max),
        modes_per_class: var("MODES", d.modes_per_class),
        ..d
    };
    let epochs = var("EPOCHS", 30);
    let world = make_world(&wc).unwrap();
    let vocab = IndVocab::new((0..wc.k_ind).map(|c| world.tag(Concept::Ind(c))).collect()).unwrap();
    let gen = |split| (0..split_size(&wc, split)).map(|i| sample_record(&world, split, i).unwrap().0).collect::<Vec<_>>();
    let train_recs = gen(Split::Train);
    let ind = gen(Split::TestInd);
    let ood = gen(Split::TestOod);
    let auroc = |det: &Detector, dcfg: &DecompositionConfig| {
        let s = |recs: &[FeatureRecord], sp| {
            recs.iter().map(|r| score_record(r, sp, &vocab, det, dcfg).unwrap().score).collect::<Vec<_>>()
        };
        evaluate(&s(&ind, Split::TestInd), &s(&ood, Split::TestOod)).unwrap()
    };
    let mut line = format!("seed {seed}");
    let only_full = env::var("ONLY_FULL").is_ok();
    for (name, tau, beta) in [("full", 0.5f32, 0.1), ("ce", 0.5, 0.0), ("tau0", 0.0, 0.1)] {
        if only_full && name != "full" { continue; }
        let dcfg = DecompositionConfig { tau, ..Default::default() };
        let train: Vec<_> = train_recs.iter().filter_map(|r| decompose_record(r, &vocab, &dcfg)).collect();
        let cfg = TrainConfig { seed, tau, beta, epochs, width: 64, ema_mode: EmaMode::Sample, ..Default::default() };
        let (state, _) = train_samples(&train, wc.k_ind, &cfg).unwrap();
        let metrics: &[Metric] = if name == "full" { &[Metric::Cosine, Metric::Euclidean, Metric::Kl] } else { &[Metric::Cosine] };
        for &m in metrics {
            let e = auroc(&Detector::Projected { params: &state.params, centers: &state.bank, metric: m }, &dcfg);
            line += &format!(" {name}:{}={:.4}/{:.3}", m.as_str(), e.auroc, e.fpr95);
        }
        if name == "full" {
            let means = projected_class_means(&state.params, &train, wc.k_ind).unwrap();
            for m in [Metric::Cosine, Metric::Euclidean] {
                let e = auroc(&Detector::Projected { params: &state.params, centers: &means, metric: m }, &dcfg);
                line += &format!(" means:{}={:.4}", m.as_str(), e.auroc);
            }
            let c = state.bank.centers();
            line += &format!(" |mu|={:.3} |mean|={:.3}", c.row(0).dot(&c.row(0)).sqrt(), means.centers().row(0).dot(&means.centers().row(0)).sqrt());
            let raw = mean_center_baseline(&train, wc.k_ind).unwrap();
            line += &format!(" mean_cs={:.4}", auroc(&Detector::RawMeanCenters { centers: &raw }, &dcfg).auroc);
            line += &format!(" tag={:.4}", auroc(&Detector::TagScore, &dcfg).auroc);
        }
    }
    println!("{line}");
}
