use std::collections::BTreeSet;

use candle_core::{DType, Device};
use proptest::prelude::*;

use discseg::checkpoint::Checkpoint;
use discseg::data::{
    preprocess, preprocess_all, sample_rng, split, synthesize_dataset, synthesize_sample, NormStats, PipelineConfig,
    SyntheticConfig,
};
use discseg::decoder::{PointLabel, PointPrompt};
use discseg::peft::{partition_parameters, Mode};
use discseg::polar::{Interpolation, PolarGrid};
use discseg::train::{train_and_evaluate, Trainer};
use discseg::{RunConfig, SegModel};

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(64) })]

    #[test]
    fn split_deterministic_and_disjoint(n in 1usize..80, ratio in 0.05f64..0.95, seed in any::<u64>()) {
        let ids: Vec<usize> = (0..n).collect();
        let (tr, te) = split(ids.clone(), ratio, seed).unwrap();
        let (tr2, te2) = split(ids, ratio, seed).unwrap();
        prop_assert_eq!(&tr, &tr2);
        prop_assert_eq!(&te, &te2);
        prop_assert_eq!(tr.len(), (n as f64 * ratio).floor() as usize);
        let a: BTreeSet<_> = tr.iter().collect();
        let b: BTreeSet<_> = te.iter().collect();
        prop_assert!(a.is_disjoint(&b));
        prop_assert_eq!(a.len() + b.len(), n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(12) })]

    #[test]
    fn polar_ground_truth_stays_nested(seed in any::<u64>(), index in 0u64..1000, size in 24usize..96) {
        let cfg = SyntheticConfig { image_size: 96, disc_axis_range: (16.0, 20.0), ..Default::default() };
        let (rec, _) = synthesize_sample(&cfg, "p", &mut sample_rng(seed, index)).unwrap();
        let pipe = PipelineConfig {
            grid: PolarGrid::new(128, 128, Interpolation::Bilinear).unwrap(),
            input_size: size,
            ..Default::default()
        };
        let p = preprocess(&rec, &pipe).unwrap();
        prop_assert!(p.masks.cup.is_subset_of(&p.masks.disc));
        prop_assert!(!p.masks.cup.is_empty());
    }
}

#[test]
fn norm_stats_come_from_training_split_only() {
    let cfg = RunConfig::tiny();
    let recs: Vec<_> = synthesize_dataset(&cfg.synthetic(), 10).unwrap().into_iter().map(|(r, _)| r).collect();
    let (train, test) = split(recs, cfg.train_ratio, cfg.seed).unwrap();
    let prep_train = preprocess_all(&train, &cfg.pipeline()).unwrap();
    let prep_test = preprocess_all(&test, &cfg.pipeline()).unwrap();
    let t = Trainer::new(&cfg, prep_train.clone()).unwrap();
    assert_eq!(t.norm(), &NormStats::fit(&prep_train).unwrap());
    assert_ne!(t.norm(), &NormStats::fit(&prep_test).unwrap());
}

#[test]
fn embedded_config_reproduces_parameter_census() {
    let cfg = RunConfig {
        mode: Mode::Peft,
        ..RunConfig::tiny()
    };
    let model = SegModel::new(&cfg.model(), cfg.seed, DType::F32, &Device::Cpu).unwrap();
    let norm = NormStats::identity(3);
    let ck = Checkpoint::capture(&cfg, &model, &norm, 0, None).unwrap();
    let mut buf = Vec::new();
    ck.write_to(&mut buf).unwrap();
    let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
    let census = SegModel::census(&back.config().unwrap().model()).unwrap();
    let stored: Vec<_> = back.params.iter().map(|p| (p.name.clone(), p.tag, p.shape.clone())).collect();
    assert_eq!(census, stored);
    let part = partition_parameters(&census, Mode::Peft).unwrap();
    assert_eq!(part.entries().len(), census.len());
}

#[test]
fn disc_only_supervision_moves_channel_zero() {
    let cfg = RunConfig {
        w_disc: 1.0,
        w_cup: 0.0,
        w_contain: 0.0,
        lr: 1e-3,
        ..RunConfig::tiny()
    };
    let recs: Vec<_> = synthesize_dataset(&cfg.synthetic(), 4).unwrap().into_iter().map(|(r, _)| r).collect();
    let prepared = preprocess_all(&recs, &cfg.pipeline()).unwrap();
    let mut t = Trainer::new(&cfg, prepared.clone()).unwrap();
    let batch: Vec<_> = prepared.iter().collect();
    let prompts = vec![
        PointPrompt {
            x: 16.0,
            y: 2.0,
            label: PointLabel::Foreground
        };
        batch.len()
    ];
    let probs = |t: &Trainer| -> (Vec<f32>, Vec<f32>) {
        let pred = t.predictor();
        let logits = pred.logits(&batch).unwrap();
        let sig = |c: usize| {
            discseg::loss::sigmoid_tensor(&logits.narrow(1, c, 1).unwrap())
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap()
        };
        (sig(0), sig(1))
    };
    let (d0, c0) = probs(&t);
    for _ in 0..5 {
        t.step_on(&batch, &prompts).unwrap();
    }
    let (d1, c1) = probs(&t);
    let moved = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64;
    let (md, mc) = (moved(&d0, &d1), moved(&c0, &c1));
    assert!(md > 2.0 * mc, "disc channel moved {md}, cup channel {mc}");
}

#[test]
fn identical_runs_give_identical_tables() {
    let cfg = RunConfig {
        seed: 9,
        epochs: 1,
        ..RunConfig::tiny()
    };
    let run = || {
        let recs: Vec<_> = synthesize_dataset(&cfg.synthetic(), 8).unwrap().into_iter().map(|(r, _)| r).collect();
        let out = train_and_evaluate(&cfg, recs, |_| {}).unwrap();
        out.report.to_sample_table()
    };
    assert_eq!(run(), run());
}
