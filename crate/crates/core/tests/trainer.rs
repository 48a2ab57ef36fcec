use iodkit::protocol::{multi_phase_plan, split, ProtocolMode};
use iodkit::synth::SynthBenchmark;
use iodkit::trainer::{run_benchmark, Mode, TrainConfig};

#[test]
fn toy_detector_learns_a_single_phase() {
    let bench = SynthBenchmark {
        train_images: 200,
        test_images: 200,
        ..SynthBenchmark::default()
    };
    let (train, features, test, test_features) = bench.generate(0).unwrap();
    let plan = multi_phase_plan("8", 8, 0, ProtocolMode::Strict).unwrap();
    let phases = split(&train, &plan).unwrap();
    assert_eq!(phases[0].images.len(), 200);
    let cfg = TrainConfig {
        mode: Mode::Finetune,
        ..TrainConfig::default()
    };
    assert_eq!((cfg.epochs, cfg.n_queries), (200, 25));
    let r = run_benchmark(&cfg, &phases, &features, &test, &test_features).unwrap();
    let ap50 = r.final_metrics().ap50.unwrap();
    assert!(ap50 >= 0.6, "AP50 {ap50}");
    println!("single-phase AP50 {ap50:.3}");
}
