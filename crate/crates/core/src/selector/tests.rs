use num_rational::Rational64;

use super::*;

fn conf<T: Scalar>(id: &str, pairs: &[(&str, T)]) -> LabelConfidence<T> {
    LabelConfidence {
        example_id: id.into(),
        conf: pairs.iter().map(|(l, c)| (l.to_string(), *c)).collect(),
        predicted: pairs.iter().map(|(l, _)| l.to_string()).collect(),
    }
}

fn cand(id: &str, sim: f64, labels: &[&str], c: f64) -> Candidate {
    Candidate {
        id: id.into(),
        sim,
        labels: labels.iter().map(|s| s.to_string()).collect(),
        confidence: Some(conf(id, &labels.iter().map(|l| (*l, c)).collect::<Vec<_>>())),
    }
}

fn table(pool: &[LabelConfidence], pct: f64) -> ThresholdTable {
    crate::confidence::compute_thresholds(pool, pct).unwrap()
}

/// c1..c4 with sims 0.9..0.6 and label sets {A},{A},{B},{A,B}.
fn four(c4_conf: f64) -> SelectionProblem {
    let cands = vec![
        cand("c1", 0.9, &["A"], 0.9),
        cand("c2", 0.8, &["A"], 0.9),
        cand("c3", 0.7, &["B"], 0.9),
        cand("c4", 0.6, &["A", "B"], c4_conf),
    ];
    let pool: Vec<LabelConfidence> = cands.iter().filter_map(|c| c.confidence.clone()).collect();
    let mut p = SelectionProblem::new("q", cands, 2);
    p.coverage_labels = vec!["A".into(), "B".into()];
    // every confidence equals 0.9 except c4's, so tau is 0.9 per label
    p.thresholds = Some(table(&pool, 100.0));
    p.relaxation = Relaxation::Strict;
    p
}

fn sorted(mut v: Vec<String>) -> Vec<String> {
    v.sort();
    v
}

#[test]
fn four_candidate_instance() {
    // {c1, c3} covers A and B with 1.6; {c1, c4} only reaches 1.5
    let p = four(0.9);
    for solver in [SolverKind::Auto, SolverKind::Dp, SolverKind::BranchAndBound] {
        let mut p = p.clone();
        p.solver = solver;
        let r = select(&p, None).unwrap();
        assert_eq!(r.chosen_ids, ["c1", "c3"]);
        assert!((r.objective - 1.6).abs() < 1e-12);
        assert!(r.relaxations.is_empty());
    }
    let b = brute_force_select(&p).unwrap();
    assert_eq!(b.chosen_ids, ["c1", "c3"]);

    let mut sim_only = p.clone();
    sim_only.mode = SelectionMode::SimilarityOnly;
    let r = select(&sim_only, None).unwrap();
    assert_eq!(r.chosen_ids, ["c1", "c2"]);
    assert!((r.objective - 1.7).abs() < 1e-12);
}

#[test]
fn coverage_forces_lower_similarity_candidate() {
    // only c4 holds B
    let mut p = four(0.9);
    p.candidates[2].labels = vec!["A".into()];
    p.candidates[2].confidence = Some(conf("c3", &[("A", 0.9)]));
    for solver in [SolverKind::Dp, SolverKind::BranchAndBound] {
        p.solver = solver;
        let r = select(&p, None).unwrap();
        assert_eq!(r.chosen_ids, ["c1", "c4"]);
        assert!((r.objective - 1.5).abs() < 1e-12);
    }
    assert_eq!(brute_force_select(&p).unwrap().chosen_ids, ["c1", "c4"]);
}

#[test]
fn ineligible_c4_gives_c3() {
    let p = four(0.5);
    let r = select(&p, None).unwrap();
    assert_eq!(r.chosen_ids, ["c1", "c3"]);
    assert!((r.objective - 1.6).abs() < 1e-12);
    assert_eq!(brute_force_select(&p).unwrap().chosen_ids, ["c1", "c3"]);
}

#[test]
fn unique_feasible_point() {
    // three eligible candidates, k = 3, their union covers everything
    let mut p = four(0.5);
    p.k = 3;
    let r = select(&p, None).unwrap();
    assert_eq!(sorted(r.chosen_ids), ["c1", "c2", "c3"]);
}

#[test]
fn k_larger_than_pool() {
    let mut p = four(0.9);
    p.k = 5;
    assert!(matches!(select(&p, None), Err(Error::InvalidProblem(_))));
    assert!(matches!(brute_force_select(&p), Err(Error::InvalidProblem(_))));
}

#[test]
fn unheld_coverage_label_is_infeasible_when_strict() {
    let mut p = four(0.9);
    p.coverage_labels.push("C".into());
    assert!(matches!(select(&p, None), Err(Error::Infeasible { .. })));
    assert!(matches!(brute_force_select(&p), Err(Error::Infeasible { .. })));

    p.relaxation = Relaxation::Ladder;
    let r = select(&p, None).unwrap();
    assert_eq!(r.chosen_ids, ["c1", "c3"]);
    assert_eq!(r.relaxations.len(), 1);
    assert!(r.relaxations[0].contains('C'));
}

#[test]
fn single_candidate() {
    let mut p = SelectionProblem::new("q", vec![cand("only", 0.3, &["A"], 1.0)], 1);
    p.coverage_labels = vec!["A".into()];
    assert_eq!(select(&p, None).unwrap().chosen_ids, ["only"]);
    assert_eq!(brute_force_select(&p).unwrap().chosen_ids, ["only"]);
}

#[test]
fn query_is_never_a_candidate() {
    let p = SelectionProblem::new("q", vec![cand("q", 0.3, &["A"], 1.0)], 1);
    assert!(matches!(select(&p, None), Err(Error::InvalidProblem(_))));
}

#[test]
fn ladder_lowers_percentile_then_drops_thresholds() {
    // four candidates with distinct A confidences; at the 80th percentile only
    // one is eligible, k = 2
    let cands: Vec<Candidate> = (0..4)
        .map(|i| cand(&format!("c{i}"), 0.9 - i as f64 * 0.1, &["A"], 0.2 * (i + 1) as f64))
        .collect();
    let pool: Vec<LabelConfidence> = cands.iter().filter_map(|c| c.confidence.clone()).collect();
    let mut p = SelectionProblem::new("q", cands, 2);
    p.coverage_labels = vec!["A".into()];
    p.thresholds = Some(table(&pool, 80.0));
    let r = select(&p, None).unwrap();
    // 70th percentile of 4 values: rank ceil(2.8) = 3 → 0.6, eligible c2, c3
    assert_eq!(r.relaxations, ["confidence percentile lowered to 70"]);
    assert_eq!(r.chosen_ids, ["c2", "c3"]);

    // a candidate without confidences can never clear a threshold
    let mut q = p.clone();
    for c in &mut q.candidates {
        c.confidence = None;
    }
    let r = select(&q, None).unwrap();
    assert_eq!(r.relaxations.last().unwrap(), "confidence thresholds dropped");
    assert_eq!(r.chosen_ids, ["c0", "c1"]);
}

#[test]
fn coverage_needing_more_than_k_exhausts_ladder() {
    let cands = vec![
        cand("a", 0.9, &["A"], 1.0),
        cand("b", 0.8, &["B"], 1.0),
        cand("c", 0.7, &["C"], 1.0),
    ];
    let mut p = SelectionProblem::new("q", cands, 2);
    p.coverage_labels = vec!["A".into(), "B".into(), "C".into()];
    let err = select(&p, None).unwrap_err();
    assert!(matches!(err, Error::Infeasible { .. }));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn missing_thresholds_records_skip() {
    let mut p = four(0.5);
    p.thresholds = None;
    p.relaxation = Relaxation::Ladder;
    let r = select(&p, None).unwrap();
    assert_eq!(r.chosen_ids, ["c1", "c3"]);
    assert_eq!(r.relaxations.len(), 1);
}

#[test]
fn random_mode_is_seeded() {
    let p = {
        let mut p = four(0.9);
        p.mode = SelectionMode::Random;
        p
    };
    assert!(select(&p, None).is_err());
    let a = select(&p, Some(7)).unwrap();
    let b = select(&p, Some(7)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.chosen_ids.len(), 2);
    let distinct: std::collections::BTreeSet<Vec<String>> = (0..40)
        .map(|s| sorted(select(&p, Some(s)).unwrap().chosen_ids))
        .collect();
    assert!(distinct.len() > 1);
}

#[test]
fn ties_pick_smallest_ids() {
    let cands = vec![
        cand("d", 0.5, &["A"], 1.0),
        cand("b", 0.5, &["A"], 1.0),
        cand("c", 0.5, &["A"], 1.0),
        cand("a", 0.5, &["A"], 1.0),
    ];
    for solver in [SolverKind::Dp, SolverKind::BranchAndBound] {
        let mut p = SelectionProblem::new("q", cands.clone(), 2);
        p.solver = solver;
        assert_eq!(select(&p, None).unwrap().chosen_ids, ["a", "b"]);
    }
    let p = SelectionProblem::new("q", cands, 2);
    assert_eq!(brute_force_select(&p).unwrap().chosen_ids, ["a", "b"]);
}

#[test]
fn exact_rational_scalars() {
    let r = |n, d| Rational64::new(n, d);
    let mk = |id: &str, sim, labels: &[&str]| Candidate {
        id: id.into(),
        sim,
        labels: labels.iter().map(|s| s.to_string()).collect(),
        confidence: Some(conf(id, &labels.iter().map(|l| (*l, r(1, 1))).collect::<Vec<_>>())),
    };
    let cands = vec![
        mk("c1", r(9, 10), &["A"]),
        mk("c2", r(8, 10), &["A"]),
        mk("c3", r(7, 10), &["B"]),
        mk("c4", r(6, 10), &["A", "B"]),
    ];
    let mut p = SelectionProblem::new("q", cands, 2);
    p.coverage_labels = vec!["A".into(), "B".into()];
    let res = select(&p, None).unwrap();
    assert_eq!(res.objective, r(8, 5));
    assert_eq!(brute_force_select(&p).unwrap().objective, r(8, 5));
}

#[test]
fn f32_scalars() {
    let cands: Vec<Candidate<f32>> = [("x", 0.25f32, "A"), ("y", 0.5, "B"), ("z", 0.75, "A")]
        .iter()
        .map(|(id, s, l)| Candidate {
            id: id.to_string(),
            sim: *s,
            labels: vec![l.to_string()],
            confidence: None,
        })
        .collect();
    let mut p = SelectionProblem::new("q", cands, 2);
    p.mode = SelectionMode::NoConfidence;
    p.coverage_labels = vec!["A".into(), "B".into()];
    let r = select(&p, None).unwrap();
    assert_eq!(r.chosen_ids, ["z", "y"]);
    assert_eq!(r.objective, 1.25);
}

#[test]
fn label_compression_preserves_optimum() {
    // B and C have identical holders; A is held by everyone
    let cands = vec![
        cand("a", 0.9, &["A"], 1.0),
        cand("b", 0.8, &["A", "B", "C"], 1.0),
        cand("c", 0.7, &["A", "B", "C"], 1.0),
        cand("d", 0.6, &["A", "D"], 1.0),
    ];
    let mut p = SelectionProblem::new("q", cands, 2);
    p.mode = SelectionMode::NoConfidence;
    p.coverage_labels = ["A", "B", "C", "D"].iter().map(|s| s.to_string()).collect();
    let prep = Prepared::new(
        &p,
        &Constraints {
            thresholds: None,
            coverage: p.coverage_labels.clone(),
        },
    )
    .unwrap()
    .unwrap();
    assert_eq!(prep.bits, 2);
    let r = select(&p, None).unwrap();
    assert_eq!(sorted(r.chosen_ids), ["b", "d"]);
    assert_eq!(brute_force_select(&p).unwrap().objective, r.objective);
}

#[test]
fn mode_parsing() {
    for m in SelectionMode::ALL {
        assert_eq!(m.as_str().parse::<SelectionMode>().unwrap(), m);
    }
    assert!("bogus".parse::<SelectionMode>().is_err());
}
