use rsknet::backbone::{ModelConfig, Network};
use rsknet::checkpoint::{network_from_container, network_to_container, Container};
use rsknet::corpus::{gen_toy_corpus, write_corpus, ToyConfig};
use rsknet::frontend::{FeatureConfig, Frontend};
use rsknet::param::Module;
use rsknet::pipeline::{embed_all, extract_features, read_manifest, training_examples};
use rsknet::train::{Example, TrainConfig, Trainer};

fn tiny_model(classes: usize) -> ModelConfig {
    ModelConfig { stage_depths: [1, 1, 1, 1], stage_widths: [2, 4, 8, 16], embed_dim: 16, num_classes: classes, ..ModelConfig::rsknet_mtsp() }
}

fn tiny_corpus() -> ToyConfig {
    ToyConfig { n_speakers: 3, utts_per_speaker: 6, heldout_per_speaker: 2, n_trials: 6, min_secs: 0.8, max_secs: 1.2, ..ToyConfig::default() }
}

fn tiny_examples() -> Vec<Example> {
    let corpus = gen_toy_corpus(&tiny_corpus()).unwrap();
    let fe = Frontend::new(&FeatureConfig::default()).unwrap();
    corpus
        .train()
        .map(|u| Example { id: u.id.clone(), label: u.speaker, features: fe.process(&corpus.synthesize(u).unwrap()).unwrap() })
        .collect()
}

fn tiny_train() -> TrainConfig {
    TrainConfig { batch_size: 4, crop_frames: 32, max_epochs: 2, lr_init: 0.05, val_fraction: 0.2, seed: 3, ..TrainConfig::default() }
}

fn bytes(c: &Container) -> Vec<u8> {
    let mut out = Vec::new();
    c.write_to(&mut out).unwrap();
    out
}

fn params(net: &Network<f32>) -> Vec<(String, Vec<u32>)> {
    let mut v = Vec::new();
    net.visit("", &mut |path, p| v.push((path.to_string(), p.value.iter().map(|x| x.to_bits()).collect())));
    v
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let net = Network::<f32>::new(tiny_model(3), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let c = network_to_container(&net);
    c.save(&path).unwrap();
    let loaded = Container::load(&path).unwrap();
    assert_eq!(bytes(&loaded), bytes(&c));
    let back: Network<f32> = network_from_container(&loaded).unwrap();
    assert_eq!(params(&back), params(&net));
    assert_eq!(back.config, net.config);
}

#[test]
fn seeded_training_is_reproducible_and_resumable() {
    let data = tiny_examples();
    let run = |epochs: usize| {
        let cfg = TrainConfig { max_epochs: epochs, ..tiny_train() };
        let mut t = Trainer::new(Network::new(tiny_model(3), cfg.seed).unwrap(), cfg).unwrap();
        t.run(&data, None, |_| {}).unwrap();
        t
    };
    let a = run(2);
    let b = run(2);
    assert_eq!(bytes(&a.to_container()), bytes(&b.to_container()));
    assert_eq!(a.state.loss_history.len(), 2);

    let half = run(1);
    let mut resumed = Trainer::from_container(&half.to_container()).unwrap();
    resumed.cfg.max_epochs = 2;
    resumed.run(&data, None, |_| {}).unwrap();
    assert_eq!(bytes(&resumed.to_container()), bytes(&a.to_container()));
}

#[test]
fn training_writes_one_checkpoint_per_epoch() {
    let data = tiny_examples();
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train();
    let mut t = Trainer::new(Network::new(tiny_model(3), 1).unwrap(), cfg).unwrap();
    let written = t.run(&data, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(written.len(), 2);
    let last = Trainer::from_container(&Container::load(&written[1]).unwrap()).unwrap();
    assert_eq!(last.state.epoch, 2);
    assert_eq!(params(&last.net), params(&t.net));
}

#[test]
fn extraction_is_deterministic_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_toy_corpus(&tiny_corpus()).unwrap();
    let paths = write_corpus(&corpus, dir.path()).unwrap();
    let entries = read_manifest(&paths.heldout_manifest).unwrap();
    let fe = Frontend::new(&FeatureConfig::default()).unwrap();
    let f1 = extract_features(&fe, &entries, 1).unwrap();
    let f3 = extract_features(&fe, &entries, 3).unwrap();
    assert_eq!(f1, f3);
    let net = Network::<f32>::new(tiny_model(3), 2).unwrap();
    let e1 = embed_all(&net, &f1, 1).unwrap();
    let e3 = embed_all(&net, &f3, 3).unwrap();
    let bits = |e: &Vec<Vec<f32>>| e.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&e1), bits(&e3));
    assert_eq!(bits(&e1), bits(&embed_all(&net, &f1, 1).unwrap()));
    assert_eq!(training_examples(&entries, f1).len(), 6);
}

#[test]
fn written_corpus_matches_synthesis() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = gen_toy_corpus(&tiny_corpus()).unwrap();
    let paths = write_corpus(&corpus, dir.path()).unwrap();
    let entries = read_manifest(&paths.train_manifest).unwrap();
    assert_eq!(entries.len(), 18);
    let fe = Frontend::new(&FeatureConfig::default()).unwrap();
    let from_disk = fe.process_file(&entries[0].path).unwrap();
    let u = corpus.train().next().unwrap();
    let direct = fe.process(&corpus.synthesize(u).unwrap()).unwrap();
    assert_eq!(from_disk.frames, direct.frames);
    let worst = from_disk.data.iter().zip(&direct.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    assert!(worst < 0.05, "16-bit quantization moved features by {worst}");
    let again = gen_toy_corpus(&tiny_corpus()).unwrap();
    assert_eq!(again.synthesize(u).unwrap(), corpus.synthesize(u).unwrap());
}
