use ctseg::phantom::{case_seed, generate_case, generate_dataset, Manifest, PhantomConfig};
use ctseg::pipeline::{
    evaluate, load_manifest_cases, prepare_case, prepare_training_data, segment, split_cases, ConstantStub, DataAudit,
    OracleStub, SplitSpec,
};
use ctseg::preprocess::PatchSpec;
use ctseg::volgrid::Class;

fn small() -> PhantomConfig {
    PhantomConfig {
        shape: [16, 32, 32],
        bone_size: (6, 10),
        seed: 21,
        ..PhantomConfig::default()
    }
}

#[test]
fn disk_dataset_matches_in_memory_generation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let written = generate_dataset(&cfg, 6, tmp.path()).unwrap();
    let manifest = Manifest::load(tmp.path()).unwrap();
    assert_eq!(manifest, written);
    let cases = load_manifest_cases(tmp.path(), &manifest).unwrap();
    assert_eq!(cases.len(), 6);
    for case in &cases {
        let (ct, label) = generate_case(&cfg, case_seed(&cfg, case.id)).unwrap();
        assert_eq!(case.ct.data(), ct.data());
        assert_eq!(case.label.as_ref(), Some(&label));
    }
}

#[test]
fn oracle_scores_perfectly_and_constant_background_scores_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let manifest = generate_dataset(&cfg, 8, tmp.path()).unwrap();
    let cases = load_manifest_cases(tmp.path(), &manifest).unwrap();
    let ids: Vec<usize> = cases.iter().map(|c| c.id).collect();
    let split = split_cases(&ids, 21, 0, &SplitSpec { test_fraction: 0.25, folds: 5 }).unwrap();
    let data = prepare_training_data(&cases, &split).unwrap();
    let spec = PatchSpec::new([8, 16, 16], [6, 12, 12]).unwrap();

    let mut audit = DataAudit::default();
    for &id in &split.test {
        let raw = &cases[id];
        let prepared = prepare_case(raw, &data.norm).unwrap();
        let oracle = OracleStub { label: prepared.label.clone() };
        assert_eq!(segment(&oracle, &prepared.ct, &spec).unwrap(), prepared.label);
        let report = evaluate(&oracle, &[raw], &data.norm, &spec, &mut audit).unwrap();
        for c in Class::FOREGROUND {
            let m = report.mean.class(c).unwrap();
            assert_eq!((m.pixel_accuracy, m.iou, m.dice), (1.0, 1.0, 1.0));
        }
    }
    assert!(audit.respects(&split));

    let test: Vec<_> = split.test.iter().map(|&i| &cases[i]).collect();
    let background = evaluate(&ConstantStub([1.0, 0.0, 0.0]), &test, &data.norm, &spec, &mut audit).unwrap();
    assert_eq!(background.mean.bone.dice, 0.0);
    assert_eq!(background.mean.nerve.iou, 0.0);
}
