use std::fs;
use std::path::Path;

use kmtr::backbone::encode;
use kmtr::heads::{forward, Task};
use kmtr::nn::Graph;
use kmtr::pipeline::{self, checkpoint_path, log_path, Checkpoint, Dataset, EncoderVariant, ExperimentConfig, Split};
use kmtr::tokenizer::Domain;
use kmtr::KmtrError;

fn upstream(cfg: &ExperimentConfig, out: &Path) -> Dataset {
    pipeline::gen_data(cfg, out).unwrap();
    let data = Dataset::load(cfg, out).unwrap();
    pipeline::pretrain(cfg, &data, Domain::Image, out).unwrap();
    pipeline::pretrain(cfg, &data, Domain::Kspace, out).unwrap();
    if !cfg.skip_align {
        pipeline::align(cfg, &data, out).unwrap();
    }
    data
}

fn losses(out: &Path, stage: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(log_path(out, stage)).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == "loss").unwrap();
    r.records().map(|x| x.unwrap()[col].parse().unwrap()).collect()
}

#[test]
fn same_seed_gives_identical_runs() {
    let cfg = ExperimentConfig::tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let da = upstream(&cfg, a.path());
    let db = upstream(&cfg, b.path());
    for stage in ["pretrain_image", "pretrain_kspace", "align"] {
        assert_eq!(losses(a.path(), stage), losses(b.path(), stage), "{stage}");
        assert_eq!(fs::read(checkpoint_path(a.path(), stage)).unwrap(), fs::read(checkpoint_path(b.path(), stage)).unwrap());
    }
    let (_, ra) = pipeline::finetune(&cfg, &da, Task::Regression, EncoderVariant::Aligned, None, a.path()).unwrap();
    let (_, rb) = pipeline::finetune(&cfg, &db, Task::Regression, EncoderVariant::Aligned, None, b.path()).unwrap();
    assert_eq!(ra, rb);
    let e1 = pipeline::evaluate(&cfg, &da, Task::Regression, EncoderVariant::Aligned, None, Split::Test, a.path()).unwrap();
    let e2 = pipeline::evaluate(&cfg, &da, Task::Regression, EncoderVariant::Aligned, None, Split::Test, a.path()).unwrap();
    assert_eq!(e1.to_json().unwrap(), e2.to_json().unwrap());
    assert_eq!((e1.r, e1.seed, e1.n_subjects), (4.0, cfg.seed, cfg.n_test));
    assert_eq!(e1.split, "test");
}

#[test]
fn fully_sampled_kspace_pretrain_has_zero_loss() {
    let mut cfg = ExperimentConfig::tiny();
    cfg.acceleration.upstream = 1.0;
    let d = tempfile::tempdir().unwrap();
    pipeline::gen_data(&cfg, d.path()).unwrap();
    let data = Dataset::load(&cfg, d.path()).unwrap();
    pipeline::pretrain(&cfg, &data, Domain::Kspace, d.path()).unwrap();
    let l = losses(d.path(), "pretrain_kspace");
    assert_eq!(l.len(), cfg.pretrain.steps);
    assert!(l.iter().all(|&v| v == 0.0));
}

#[test]
fn every_task_runs_for_both_encoders_and_reports_baselines() {
    let cfg = ExperimentConfig::tiny();
    let d = tempfile::tempdir().unwrap();
    let data = upstream(&cfg, d.path());
    for task in Task::ALL {
        let (ck, val) = pipeline::finetune(&cfg, &data, task, EncoderVariant::Aligned, None, d.path()).unwrap();
        assert_eq!(val.split, "val");
        assert_eq!(val.tags["encoder"], "k-MTR");
        let test = pipeline::evaluate(&cfg, &data, task, EncoderVariant::Aligned, None, Split::Test, d.path()).unwrap();
        test.validate().unwrap();
        match task {
            Task::Regression => assert!(test.get("regression", "baseline_mae_LVEF").is_some()),
            Task::Reconstruction => assert!(test.get("reconstruction", "zero_filled_psnr").is_some()),
            Task::Segmentation => assert!(test.get("segmentation", "dice_foreground").is_some()),
            Task::Classification => assert!(test.get("classification", "reduced_EF_f1").is_some()),
        }
        let loaded = Checkpoint::load(&checkpoint_path(d.path(), &ck.header.stage)).unwrap();
        assert_eq!(loaded, ck);
    }
    let (_, un) = pipeline::finetune(&cfg, &data, Task::Regression, EncoderVariant::Unaligned, None, d.path()).unwrap();
    assert_eq!(un.tags["encoder"], "MAE_k^u");
    let recon = fs::read_dir(d.path().join("predictions/finetune_reconstruction_aligned_r4_test")).unwrap().count();
    assert_eq!(recon, cfg.n_test);
}

#[test]
fn checkpoint_roundtrip_reproduces_forward_bit_exactly() {
    let cfg = ExperimentConfig::tiny();
    let d = tempfile::tempdir().unwrap();
    let data = upstream(&cfg, d.path());
    let (ck, _) = pipeline::finetune(&cfg, &data, Task::Segmentation, EncoderVariant::Aligned, None, d.path()).unwrap();
    let loaded = Checkpoint::load(&checkpoint_path(d.path(), &ck.header.stage)).unwrap();
    let s = &data.split(Split::Test)[0];
    let seq = data.kspace_input(s, &data.mask(&cfg, s, 8.0, 0).unwrap()).unwrap();
    let enc = cfg.encoder().unwrap();
    let run = |store| {
        let mut g = Graph::new();
        let kmtr::heads::HeadOutputs::Segmentation(v) = forward(&mut g, store, Task::Segmentation, &enc, &cfg.heads, &[&seq]).unwrap() else { panic!() };
        g.value(v[0]).iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(&ck.params), run(&loaded.params));
    let a = encode(&seq, &ck.params, &enc).unwrap();
    let b = encode(&seq, &loaded.params, &enc).unwrap();
    assert_eq!(a.class_token, b.class_token);
}

#[test]
fn contaminated_checkpoint_is_rejected() {
    let cfg = ExperimentConfig::tiny();
    let d = tempfile::tempdir().unwrap();
    let data = upstream(&cfg, d.path());
    let (mut ck, _) = pipeline::finetune(&cfg, &data, Task::Regression, EncoderVariant::Aligned, None, d.path()).unwrap();
    let test_id = data.splits.test[0].clone();
    ck.header.meta["finetune"]["train_ids"].as_array_mut().unwrap().push(test_id.into());
    ck.save(&checkpoint_path(d.path(), &ck.header.stage)).unwrap();
    let err = pipeline::evaluate(&cfg, &data, Task::Regression, EncoderVariant::Aligned, None, Split::Test, d.path()).unwrap_err();
    assert!(matches!(err, KmtrError::SplitContamination(_)), "{err}");
}

#[test]
fn skipping_alignment_labels_runs_as_ablation() {
    let mut cfg = ExperimentConfig::tiny();
    cfg.skip_align = true;
    let d = tempfile::tempdir().unwrap();
    let data = upstream(&cfg, d.path());
    assert!(pipeline::align(&cfg, &data, d.path()).is_err());
    let (ck, rep) = pipeline::finetune(&cfg, &data, Task::Regression, EncoderVariant::Aligned, None, d.path()).unwrap();
    assert_eq!(rep.tags["encoder"], "MAE_k^u");
    assert!(ck.header.stage.contains("unaligned"));
}

#[test]
fn invalid_alignment_config_fails_before_compute() {
    let mut cfg = ExperimentConfig::tiny();
    cfg.alignment.tau = -1.0;
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(pipeline::gen_data(&cfg, d.path()), Err(KmtrError::InvalidConfig(_))));
    assert!(!d.path().join("data").exists());
}

#[test]
fn missing_upstream_checkpoint_is_reported() {
    let cfg = ExperimentConfig::tiny();
    let d = tempfile::tempdir().unwrap();
    pipeline::gen_data(&cfg, d.path()).unwrap();
    let data = Dataset::load(&cfg, d.path()).unwrap();
    assert!(matches!(pipeline::align(&cfg, &data, d.path()), Err(KmtrError::MissingArtifact(_))));
}

#[test]
fn embeddings_cover_the_split() {
    let cfg = ExperimentConfig::tiny();
    let d = tempfile::tempdir().unwrap();
    let data = upstream(&cfg, d.path());
    for v in EncoderVariant::ALL {
        let t = pipeline::export_embeddings(&cfg, &data, v, Split::Test, d.path()).unwrap();
        assert_eq!(t.ids.len(), cfg.n_test);
        assert_eq!(t.embeddings[0].len(), cfg.alignment.proj_dim);
        let again = pipeline::export_embeddings(&cfg, &data, v, Split::Test, d.path()).unwrap();
        assert_eq!(t, again);
        let rows = csv::Reader::from_path(pipeline::embed::EmbeddingTable::path(d.path(), v, Split::Test)).unwrap().records().count();
        assert_eq!(rows, cfg.n_test);
    }
}
