use dgprune::domains::{generate, split, Dataset, SyntheticSpec};
use dgprune::harness::*;
use dgprune::metrics::{accuracy, accuracy_of};
use dgprune::nn::{ArchConfig, GatedModel, ParamId};
use dgprune::pruning::Criterion;
use dgprune::tensor::Tensor;
use serde_json::json;

const TINY: &str = r#"
held_out_domain = 1
seeds = [0, 1, 2, 3, 4]

[data.synthetic]
n_classes = 3
height = 8
width = 8
samples_per_domain = 40

[architecture]
height = 8
width = 8
channels = [4, 4]
kernel_sizes = [3, 3]
n_classes = 3

[pretrain]
epochs = 1
batch_size = 9

[pruning.finetune]
epochs = 1
batch_size = 9

[pruning.finetune.schedule]
interval_minibatches = 2
max_filters_per_event = 2
"#;

fn constant_model(arch: &ArchConfig, class: usize) -> GatedModel<f64> {
    let mut m = GatedModel::build(arch, 0).unwrap();
    m.param_values_mut(ParamId::HeadWeight).fill(0.0);
    let bias = m.param_values_mut(ParamId::HeadBias);
    bias.fill(0.0);
    bias[class] = 1.0;
    m
}

/// Four domains of twelve samples whose labels cycle through four classes.
fn cyclic_dataset() -> Dataset {
    let n = 48;
    let ds = generate(&SyntheticSpec {
        samples_per_domain: 12,
        height: 6,
        width: 6,
        ..SyntheticSpec::default()
    })
    .unwrap();
    Dataset {
        labels: (0..n).map(|i| i % 4).collect(),
        ..ds
    }
}

#[test]
fn constant_predictor_scores_class_frequency() {
    let ds = cyclic_dataset();
    let arch = ArchConfig {
        height: 6,
        width: 6,
        channels: vec![2],
        kernel_sizes: vec![3],
        ..ArchConfig::default()
    };
    let model = constant_model(&arch, 2);
    let all: Vec<usize> = (0..ds.len()).collect();
    assert_eq!(accuracy(&model, &ds, &all).unwrap(), 25.0);
    let plan = split(&ds, 0, 3).unwrap();
    assert_eq!(evaluate(&model, &ds, &plan).unwrap().cross, 25.0);
    assert_eq!(accuracy_of(&ds.labels, &ds.labels), 100.0);
}

#[test]
fn accuracy_matches_hand_count() {
    let ds = generate(&SyntheticSpec {
        n_classes: 3,
        height: 8,
        width: 8,
        samples_per_domain: 10,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let arch = ArchConfig {
        height: 8,
        width: 8,
        channels: vec![3],
        kernel_sizes: vec![3],
        n_classes: 3,
        ..ArchConfig::default()
    };
    let model = GatedModel::<f64>::build(&arch, 5).unwrap();
    let idx: Vec<usize> = (0..40).step_by(2).collect();
    assert_eq!(idx.len(), 20);
    let mut correct = 0;
    for &i in &idx {
        let x = Tensor::new(vec![1, 3, 8, 8], ds.image(i).to_vec()).unwrap();
        if model.predict(&x).unwrap()[0] == ds.labels[i] {
            correct += 1;
        }
    }
    assert_eq!(accuracy(&model, &ds, &idx).unwrap(), 100.0 * correct as f64 / 20.0);
}

#[test]
fn tiny_experiment_writes_paired_arms() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.output_dir = Some(dir.path().to_path_buf());
    let out = run_experiment(&cfg).unwrap();

    assert_eq!(out.results.len(), 2);
    let records: usize = out.results.iter().map(|(_, r)| r.per_seed.len()).sum();
    assert_eq!(records, 10);
    let taylor = out.arm(Criterion::Taylor).unwrap();
    let ior = out.arm(Criterion::Ior).unwrap();
    for (t, i) in taylor.per_seed.iter().zip(&ior.per_seed) {
        assert_eq!(t.seed, i.seed);
        assert_eq!(t.pretrained_sha256, i.pretrained_sha256);
        assert_eq!(t.before, i.before);
        assert_eq!(t.remaining_ratio, 0.5);
        assert_eq!(out.checksums[&t.seed], t.pretrained_sha256);
    }
    // Different seeds pretrain different models.
    assert_ne!(taylor.per_seed[0].pretrained_sha256, taylor.per_seed[1].pretrained_sha256);

    for name in ["config.toml", "manifest.json", "results_taylor.json", "results_ior.json", "seed_0/pretrained.pldg", "seed_4/ior/events.jsonl"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let loaded = ResultsFile::load(&dir.path().join("results_ior.json")).unwrap();
    assert_eq!(&loaded, ior);
    let arm = loaded.arm().unwrap();
    assert_eq!((arm.criterion, arm.held_out_domain, arm.pretrain.as_str()), (Criterion::Ior, 1, "erm"));

    // The echoed config reproduces the run.
    let echoed = ExperimentConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn full_ratio_keeps_every_filter() {
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.seeds = vec![3];
    cfg.pruning.criteria = vec![Criterion::Taylor];
    cfg.pruning.finetune.schedule.target_remaining_ratio = 1.0;
    let out = run_experiment(&cfg).unwrap();
    assert_eq!(out.results[0].1.per_seed[0].remaining_ratio, 1.0);
}

#[test]
fn seed_runs_are_reproducible() {
    let cfg = ExperimentConfig::from_toml(TINY).unwrap();
    let ds = cfg.data.load().unwrap();
    let a = run_seed::<f64>(&cfg, &ds, 2, None).unwrap();
    let b = run_seed::<f64>(&cfg, &ds, 2, None).unwrap();
    assert_eq!(a.pretrained_sha256, b.pretrained_sha256);
    for ((_, ra, ea), (_, rb, eb)) in a.arms.iter().zip(&b.arms) {
        assert_eq!(ra.events, rb.events);
        assert_eq!(ea, eb);
    }
}

fn results(pretrain: &str, criterion: &str, domain: &str, before: (f64, f64), afters: &[(f64, f64)]) -> ResultsFile {
    let per_seed: Vec<SeedResult> = afters
        .iter()
        .enumerate()
        .map(|(i, &(ai, ac))| SeedResult {
            seed: i as u64,
            before: Evaluation {
                intra: before.0,
                cross: before.1,
            },
            after: Evaluation { intra: ai, cross: ac },
            remaining_ratio: 0.5,
            pretrained_sha256: String::new(),
            best_epoch: Some(0),
        })
        .collect();
    ResultsFile {
        config_echo: json!({"arm": {
            "pretrain": pretrain, "criterion": criterion, "target_remaining_ratio": 0.5,
            "held_out_domain": 0, "held_out_domain_name": domain,
        }}),
        aggregate: aggregate(&per_seed),
        per_seed,
        failures: Vec::new(),
    }
}

#[test]
fn report_delta_is_after_minus_before() {
    let files = [
        results("erm", "taylor", "Photo", (95.0, 80.0), &[(94.0, 77.0), (95.0, 78.14)]),
        results("erm", "taylor", "Sketch", (90.0, 60.0), &[(89.0, 59.0)]),
        results("erm", "ior", "Photo", (95.0, 80.0), &[(94.5, 79.0)]),
    ];
    let report = Report::build(&files).unwrap();
    assert_eq!(report.domains, vec!["Photo", "Sketch"]);
    let delta: Vec<&ReportRow> = report.phase(Phase::Delta).collect();
    assert_eq!(delta.len(), 2);
    assert!((delta[0].cells["Photo"].cross - -2.43).abs() < 1e-9);
    assert!((delta[0].cells["Photo"].intra - -0.5).abs() < 1e-9);
    assert!(!delta[1].cells.contains_key("Sketch"));

    let md = report.to_markdown();
    assert!(md.contains("| erm | taylor | 50% | Δ | -0.50 | -2.43 | -1.00 | -1.00 |"), "{md}");
    assert!(md.contains("| erm | ior | 50% | 94.50 | 79.00 | - | - |"), "{md}");
}

#[test]
fn report_csv_round_trip() {
    let files = [
        results("mixup", "taylor", "D0", (91.1, 71.3), &[(90.0, 1.0 / 3.0), (88.8, 70.1)]),
        results("mixup", "ior", "D2", (91.1, 71.3), &[(90.2, 69.9)]),
    ];
    let report = Report::build(&files).unwrap();
    let csv = report.to_csv();
    assert_eq!(Report::from_csv(&csv).unwrap(), report);
    assert!(csv.starts_with("model,criterion,ratio,phase,D0_intra,D0_cross,D2_intra,D2_cross\n"));
}

#[test]
fn report_from_written_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    results("coral", "ior", "D3", (90.0, 50.0), &[(89.0, 45.0)]).save(&path).unwrap();
    let report = report(&[path], &dir.path().join("out")).unwrap();
    assert_eq!(report.rows.len(), 3);
    let csv = std::fs::read_to_string(dir.path().join("out/report.csv")).unwrap();
    assert_eq!(Report::from_csv(&csv).unwrap(), report);
    assert!(dir.path().join("out/report.md").exists());
}

#[test]
fn malformed_results_name_the_field() {
    let mut v = serde_json::to_value(results("erm", "taylor", "D0", (1.0, 2.0), &[(1.0, 2.0)])).unwrap();
    v["per_seed"][0]["after"].as_object_mut().unwrap().remove("cross");
    let err = ResultsFile::parse(&v.to_string()).unwrap_err();
    assert_eq!(err.kind(), "schema");
    assert!(err.to_string().contains("per_seed[0].after.cross"), "{err}");

    let mut v = serde_json::to_value(results("erm", "taylor", "D0", (1.0, 2.0), &[(1.0, 2.0)])).unwrap();
    v.as_object_mut().unwrap().remove("aggregate");
    assert!(ResultsFile::parse(&v.to_string()).unwrap_err().to_string().contains("aggregate"));

    let bad_csv = "model,criterion,ratio,phase,D0_intra,D0_cross\nerm,taylor,0.5,after,abc,1\n";
    let err = Report::from_csv(bad_csv).unwrap_err();
    assert!(err.to_string().contains("D0_intra"), "{err}");
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let err = ExperimentConfig::from_toml("held_out_domain = 3\nlearning_rate = 0.1").unwrap_err();
    assert_eq!(err.kind(), "config");
    assert!(err.to_string().contains("learning_rate"), "{err}");
    assert!(ExperimentConfig::from_toml("held_out_domain = 3\n[pruning.finetune.schedule]\nintervl = 3").is_err());
    assert!(ExperimentConfig::from_toml("held_out_domain = 4").is_err());
    assert!(ExperimentConfig::from_toml("held_out_domain = 0\n[pretrain.loss]\nmethod = \"coral\"\nlambda = -1.0").is_err());
    let cfg = ExperimentConfig::from_toml("held_out_domain = 0\n[pretrain.loss]\nmethod = \"mixup\"").unwrap();
    assert_eq!(cfg.pretrain.loss.name(), "mixup");
    assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
}

#[test]
fn architecture_must_fit_data() {
    let mut cfg = ExperimentConfig::from_toml(TINY).unwrap();
    cfg.architecture.n_classes = 4;
    assert_eq!(run_experiment(&cfg).unwrap_err().kind(), "config");
}
