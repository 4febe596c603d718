use dipformer::gradcheck::{covered_ops, end_to_end, op_suite, END_TO_END_TOLERANCE, OP_TOLERANCE};
use dipformer::OpKind;

#[test]
fn every_op_passes_finite_differences() {
    for seed in [1, 2] {
        for r in op_suite(seed, None).unwrap() {
            assert_eq!(r.tolerance, OP_TOLERANCE);
            assert!(r.passed(), "{r}");
        }
    }
}

#[test]
fn suite_covers_every_differentiable_op() {
    let covered = covered_ops();
    for k in OpKind::ALL {
        if k != OpKind::Leaf {
            assert!(covered.contains(&k), "{k:?} has no gradient case");
        }
    }
}

#[test]
fn reduced_model_passes_end_to_end() {
    let r = end_to_end(1, 20, None).unwrap();
    assert_eq!(r.tolerance, END_TO_END_TOLERANCE);
    assert_eq!(r.checked, 20);
    assert!(r.passed(), "{r}");
}

#[test]
fn injected_faults_are_caught() {
    for k in [OpKind::Conv2d, OpKind::GroupNorm, OpKind::Softmax, OpKind::CrossAttention] {
        let results = op_suite(1, Some(k)).unwrap();
        let hit: Vec<_> = results.iter().filter(|r| r.op == Some(k)).collect();
        assert!(!hit.is_empty());
        assert!(hit.iter().all(|r| !r.passed()), "fault in {k:?} went unnoticed");
    }
    assert!(!end_to_end(1, 20, Some(OpKind::GroupNorm)).unwrap().passed());
}
