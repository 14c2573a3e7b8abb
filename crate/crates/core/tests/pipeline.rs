use forge_core::corpus::{build_corpus, CorpusConfig, Manifest, MixtureKind, RigConfig, Split};
use forge_core::duplex::DeviceConfig;
use forge_core::metrics::{evaluate_items, si_sdr_pit, Condition, EvalItem};
use forge_core::separator::{separate, train_from_manifest, SeparatorConfig, TrainConfig};

fn items(manifest: &Manifest, root: &std::path::Path, split: Split) -> Vec<EvalItem> {
    manifest
        .split(split)
        .map(|e| {
            let ex = manifest.load_example(root, e, MixtureKind::Synthetic).unwrap();
            EvalItem {
                mix_id: ex.mix_id,
                mixture: ex.mixture,
                references: ex.sources.to_vec(),
            }
        })
        .collect()
}

#[test]
fn toy_training_learns_and_separates() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = CorpusConfig {
        mixtures: 20,
        split_ratio: [12, 4, 4],
        ..CorpusConfig::default()
    };
    let manifest = build_corpus(&corpus, &RigConfig::default(), &DeviceConfig::ideal(1), root).unwrap();
    let tconfig = TrainConfig {
        epochs: 30,
        learning_rate: 3e-3,
        ..TrainConfig::desk_scale()
    };
    let sconfig = SeparatorConfig::desk_scale();
    let out = train_from_manifest(&manifest, root, MixtureKind::Synthetic, &tconfig, &sconfig).unwrap();
    assert_eq!(out.curve.len(), 30);
    assert!(out.curve[29].train_loss < out.curve[0].train_loss, "{:?}", out.curve);
    assert!(out.curve.iter().all(|r| (0.0..=1.0).contains(&r.train_loss) && (0.0..=1.0).contains(&r.valid_loss)));

    let test = items(&manifest, root, Split::Test);
    let train = items(&manifest, root, Split::Train);
    let sep = |mix: &_| separate(mix, &out.params, &sconfig);
    let held_out = evaluate_items("m", Condition { label: "synthetic-test".into(), distance_m: None }, &test, sep).unwrap();
    let seen = evaluate_items("m", Condition { label: "synthetic-train".into(), distance_m: None }, &train, sep).unwrap();
    let mixture: f64 = test
        .iter()
        .map(|i| si_sdr_pit(&[i.mixture.clone(), i.mixture.clone()], &i.references).unwrap().mean_db)
        .sum::<f64>()
        / test.len() as f64;
    assert!(held_out.aggregate.mean > mixture, "separated {} vs mixture {mixture}", held_out.aggregate.mean);
    assert!(seen.aggregate.mean >= held_out.aggregate.mean, "train {} vs test {}", seen.aggregate.mean, held_out.aggregate.mean);
}
