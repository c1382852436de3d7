use occlass_core::corpus::{split, SplitSpec};
use occlass_core::evalmetrics::{evaluate, level_rankings, F1Classes};
use occlass_core::hierarchy::CombineMode;
use occlass_core::pipeline::{gold_leaves, train_bundle, EncoderSpec, HeadRole, HeadSpec, PostProcess, Predictor, TrainTarget};
use occlass_core::synth::{keyword_ads, synthetic_taxonomy};
use occlass_core::taxonomy::Scheme;
use occlass_core::textprep::Field;
use occlass_core::train::TrainConfig;
use occlass_core::{ModelBundle32, ModelBundle64};

fn config() -> TrainConfig {
    TrainConfig { learning_rate: 0.01, epochs: 20, accumulation_steps: 1, patience: 20, seed: 3, ..TrainConfig::default() }
}

fn head() -> HeadSpec {
    HeadSpec { width: 48, dropout: 0.1, ..HeadSpec::default() }
}

#[test]
fn all_levels_in_both_precisions() {
    let t = synthetic_taxonomy(Scheme::Ons2020, &[3, 5, 8, 12], 6).unwrap();
    let ads = keyword_ads(&t, 600, 6);
    let (train, test) = split(&ads, &SplitSpec::new(0.15, 6, Scheme::Ons2020)).unwrap();
    let enc = EncoderSpec::hashed_text(Field::Title, 2048, 2);
    let (b64, reports) = train_bundle::<f64>(&t, &train, &[], enc.clone(), &TrainTarget::AllLevels, &head(), &config(), None, &|_, _| {}).unwrap();
    let (b32, _) = train_bundle::<f32>(&t, &train, &[], enc, &TrainTarget::AllLevels, &head(), &config(), None, &|_, _| {}).unwrap();
    assert_eq!(reports.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>(), (1..=4).map(HeadRole::Level).collect::<Vec<_>>());

    // Text form survives a round trip and refuses the other precision.
    let text = b32.to_text();
    assert_eq!(ModelBundle32::parse(&text).unwrap().to_text(), text);
    assert!(ModelBundle64::parse(&text).is_err());

    let golds: Vec<usize> = gold_leaves(&t, &test).into_iter().map(|g| t.position(g.unwrap())).collect();
    for mode in [CombineMode::Leaf, CombineMode::JointProb] {
        let post = PostProcess { mode, ..PostProcess::default() };
        let p64 = Predictor::new(&t, &b64, post.clone()).unwrap();
        let p32 = Predictor::new(&t, &b32, post).unwrap();
        let mut agree = 0;
        let mut rankings = Vec::new();
        for ad in &test {
            let a = p64.predict_ad(ad, None).unwrap();
            let b = p32.predict_ad(ad, None).unwrap();
            agree += usize::from(a.leaf() == b.leaf());
            rankings.push(level_rankings(&t, &a.ranking));
        }
        assert!(agree * 10 >= test.len() * 9, "{mode}: f32 and f64 agree on {agree}/{}", test.len());
        let report = evaluate(&t, &rankings, &golds, F1Classes::All).unwrap();
        let top1: Vec<f64> = report.levels.iter().map(|l| l.top1).collect();
        assert!(top1[3] > 90.0, "{mode}: {top1:?}");
        assert!(top1.windows(2).all(|w| w[0] >= w[1]), "{mode}: {top1:?}");
    }
}

#[test]
fn lcpn_bundle_routes_and_defers() {
    let t = synthetic_taxonomy(Scheme::Custom, &[3, 6, 12], 2).unwrap();
    let ads = keyword_ads(&t, 300, 2);
    let enc = EncoderSpec::hashed_text(Field::Title, 1024, 1);
    let (bundle, _) = train_bundle::<f64>(&t, &ads, &[], enc, &TrainTarget::Lcpn, &head(), &config(), None, &|_, _| {}).unwrap();
    let routed = Predictor::new(&t, &bundle, PostProcess { lcpn_threshold: Some(0.0), ..PostProcess::default() }).unwrap();
    let deferred = Predictor::new(&t, &bundle, PostProcess { lcpn_threshold: Some(1.0), ..PostProcess::default() }).unwrap();
    let flat = Predictor::new(&t, &bundle, PostProcess::default()).unwrap();
    let mut descended = 0;
    for ad in ads.iter().take(60) {
        let r = routed.predict_ad(ad, None).unwrap();
        let trace = r.trace.route.as_ref().unwrap();
        descended += usize::from(trace.len() == t.depth());
        assert_eq!(deferred.predict_ad(ad, None).unwrap().leaf(), flat.predict_ad(ad, None).unwrap().leaf());
    }
    assert!(descended > 50, "only {descended} of 60 ads routed to a leaf");
}
