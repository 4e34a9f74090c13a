// scratch: site-restricted vis conditioning probe
use harmony_core::backbone::ToyModel;
use harmony_core::config::{TrainConfig, TrainStage};
use harmony_core::encoders::auxiliary_caption;
use harmony_core::scene::{generate_benchmark, generate_training_corpus, render_scene, EditKind};
use harmony_core::scorer::{AlignmentScorer, BlobOracle};
use harmony_core::train::{build_variant, pretrain, train_adapter};
use harmony_core::HarmonyConfig;
use harmony_cli::checkpoint::{load_checkpoint, save_checkpoint, CheckpointStage};
use std::time::Instant;

#[test]
fn dryrun() {
    let cfg = HarmonyConfig::default();
    let corpus = generate_training_corpus(7, 2000, 32).unwrap();
    let ckpt = std::path::PathBuf::from("/tmp/probe_site.ckpt");
    let t0 = Instant::now();
    let base = if ckpt.exists() {
        eprintln!("loading cached");
        load_checkpoint(&ckpt).unwrap().0
    } else {
        let mut m = ToyModel::new(&cfg, 7).unwrap();
        let tc = TrainConfig { steps: 20000, seed: 7, ..TrainConfig::pretrain_default() };
        let log = pretrain(&mut m, &corpus, &tc).unwrap();
        eprintln!("pretrain 20k in {:?}; loss {:.4} -> {:.4}",
            t0.elapsed(), log.mean_loss(0..200), log.mean_loss(19800..20000));
        save_checkpoint(&mut m, CheckpointStage::Pretrained, &ckpt).unwrap();
        m
    };
    let oracle = BlobOracle::default();
    let bench = generate_benchmark(1, 32).unwrap();
    let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();

    // is D4 alive now?
    {
        let entry = bench.iter().find(|e| e.scene.count == 3).unwrap();
        let src = render_scene(&entry.scene, 32);
        let text = base.text.encode(&base.vocab.tokenize(&entry.scene.caption).unwrap());
        let vis = base.project_harmony(&base.image.encode(&src).unwrap()).unwrap();
        let x_t = {
            let mut rng = harmony_core::rng::CounterRng::new(9);
            let mut n = harmony_core::LatentImage::zeros(1, 3, 32, 32);
            rng.fill_gaussian(&mut n.data);
            base.schedule.add_noise(&src, &n, 500).unwrap()
        };
        let with_vis = base.forward_ctx(&x_t, 500, &text, None, 0.0, Some(&vis)).unwrap().0;
        let without = base.forward_ctx(&x_t, 500, &text, None, 0.0, None).unwrap().0;
        let d: Vec<f64> = with_vis.data.iter().zip(&without.data).map(|(a, b)| a - b).collect();
        eprintln!("D4 vis-conditioning eps shift = {:.5}", rms(&d));
    }

    // adapter benefit
    let mut full = build_variant(&base, harmony_core::config::AblationVariant::Full, &base.cfg, 11).unwrap();
    let atc = TrainConfig { steps: 2000, seed: 11, stage: TrainStage::Adapter, ..TrainConfig::adapter_default() };
    let alog = train_adapter(&mut full, &corpus, &atc).unwrap();
    eprintln!("adapter loss: {:.4} -> {:.4}", alog.mean_loss(0..200), alog.mean_loss(1800..2000));
    for w in [2.0f64, 3.0] {
        let mut hits_full = 0usize; let mut hits_base = 0usize; let mut n = 0usize;
        for entry in bench.iter().filter(|e| e.scene.count <= 5).take(15) {
            let scene = &entry.scene;
            let src = render_scene(scene, 32);
            let inst = entry.instructions.iter().find(|i| i.kind == EditKind::Class).unwrap();
            let text = full.text.encode(&full.vocab.tokenize(&inst.prompt).unwrap());
            let f_v = full.image.encode(&src).unwrap();
            let f_a = full.text.encode(&full.vocab.tokenize(&auxiliary_caption(scene)).unwrap());
            let fh = full.make_harmony(&f_v, &f_a).unwrap();
            let target = inst.apply(scene);
            for seed in [3u64, 17] {
                let img = full.sample(seed, 30, &text, Some(&fh), w).unwrap();
                hits_full += oracle.count_accuracy(&img, &target).unwrap() as usize;
                let img_b = base.sample(seed, 30, &text, None, w).unwrap();
                hits_base += oracle.count_accuracy(&img_b, &target).unwrap() as usize;
                n += 1;
            }
        }
        eprintln!("w={w} class-edit: harmony {hits_full}/{n} vs text-only {hits_base}/{n}");
    }
    eprintln!("total {:?}", t0.elapsed());
}
