mod common;

use std::collections::BTreeMap;
use std::path::Path;

use ssacrnn::evaluation::Layout;
use ssacrnn::model::checkpoint;
use ssacrnn::pipeline::{cmd_eval, cmd_features, cmd_train, RunConfig, Variant};
use ssacrnn::Error;

fn cache_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e != "tsv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

/// Drops the wall-time column of a training log.
fn mask_wall_time(log: &str) -> String {
    log.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split('\t').collect();
            f[3] = "-";
            f.join("\t") + "\n"
        })
        .collect()
}

#[test]
fn feature_cache_counts_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::toy_run(dir.path(), &common::synth(4, 5));
    let first = cmd_features(&cfg).unwrap();
    assert_eq!((first.utterances, first.segments, first.written), (80, 80, 80));
    assert!(first.errors.is_empty());
    let files = cache_files(&cfg.cache_dir);
    assert_eq!(files.len(), 80);

    let second = cmd_features(&cfg).unwrap();
    assert_eq!((second.written, second.skipped), (0, 80));
    assert_eq!(cache_files(&cfg.cache_dir), files);
}

#[test]
fn three_second_utterances_give_one_segment_each() {
    let dir = tempfile::tempdir().unwrap();
    let synth = ssacrnn::evaluation::SynthConfig {
        seconds: 3.0,
        ..common::synth(4, 5)
    };
    let mut cfg = common::toy_run(dir.path(), &synth);
    cfg.framing = ssacrnn::features::Framing::default();
    let r = cmd_features(&cfg).unwrap();
    assert_eq!((r.utterances, r.segments), (80, 80));
}

#[test]
fn corrupt_wav_is_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::toy_run(dir.path(), &common::synth(4, 1));
    let manifest = std::fs::read_to_string(&cfg.manifest).unwrap();
    let victim = manifest.lines().nth(3).unwrap().split('\t').next().unwrap();
    let victim = cfg.manifest.parent().unwrap().join(victim);
    std::fs::write(&victim, b"RIFF\x10\x00\x00\x00WAVEjunk").unwrap();

    let r = cmd_features(&cfg).unwrap();
    assert_eq!(r.errors.len(), 1);
    assert_eq!(r.errors[0].path, victim);
    assert_eq!(r.utterances, 15);
    assert_eq!(cache_files(&cfg.cache_dir).len(), 15);
    let errors = std::fs::read_to_string(cfg.cache_dir.join("errors.tsv")).unwrap();
    assert_eq!(errors.lines().count(), 1);
}

#[test]
fn training_needs_a_feature_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::toy_run(dir.path(), &common::synth(4, 1));
    assert!(matches!(cmd_train(&cfg, None), Err(Error::MissingArtifact(_))));
}

fn trained(dir: &Path, variant: Variant, seed: u64) -> RunConfig {
    let mut cfg = common::toy_run(dir, &common::synth(4, 2));
    cfg.variant = variant;
    cfg.seed = seed;
    cfg.train.max_epochs = 2;
    cmd_features(&cfg).unwrap();
    cmd_train(&cfg, None).unwrap();
    cfg
}

#[test]
fn plain_variant_trains_one_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path(), Variant::Acrnn, 0);
    for fold in 1..=2 {
        let d = cfg.fold_dir(fold);
        assert!(d.join("em.ckpt").is_file());
        assert!(!d.join("sp.ckpt").exists());
    }
    let report = cmd_eval(&cfg).unwrap();
    assert_eq!(report.text.lines().count(), 3);
    // every utterance is validated exactly once
    let rows = report.confusion.row_sums();
    assert_eq!(rows, vec![8; 4]);
}

#[test]
fn speaker_stage_excludes_validation_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path(), Variant::SsaCrnnR, 0);
    assert_eq!(cfg.layout, Layout::Synthetic { folds: 2 });
    let (_, plans) = ssacrnn::pipeline::fold_plans(&cfg, &[]).unwrap();
    for plan in &plans {
        let d = cfg.fold_dir(plan.fold_index);
        let (sp, header) = checkpoint::load(&d.join("sp.ckpt")).unwrap();
        assert!(sp.is_frozen());
        assert_eq!(header.excluded_speakers, plan.valid_speakers);
        assert!(sp.class_names().iter().all(|s| !plan.valid_speakers.contains(s)));
        let (_, em) = checkpoint::load(&d.join("em.ckpt")).unwrap();
        assert_eq!(em.sp_checkpoint_hash, Some(checkpoint::content_hash(&d.join("sp.ckpt")).unwrap()));
    }
    let report = cmd_eval(&cfg).unwrap();
    assert_eq!(report.confusion.total(), 32);

    std::fs::remove_file(cfg.fold_dir(2).join("sp.ckpt")).unwrap();
    match cmd_eval(&cfg) {
        Err(Error::MissingArtifact(m)) => assert!(m.contains("fold02")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn reruns_reproduce_logs_and_checkpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = trained(a.path(), Variant::AcrnnR, 5);
    let cb = trained(b.path(), Variant::AcrnnR, 5);
    for fold in 1..=2 {
        let (da, db) = (ca.fold_dir(fold), cb.fold_dir(fold));
        let log_a = std::fs::read_to_string(da.join("em.log")).unwrap();
        let log_b = std::fs::read_to_string(db.join("em.log")).unwrap();
        assert_eq!(mask_wall_time(&log_a), mask_wall_time(&log_b));
        assert_eq!(std::fs::read(da.join("em.ckpt")).unwrap(), std::fs::read(db.join("em.ckpt")).unwrap());
    }
}
