use kgd_wasm_demo::{gumbel_summary, KnowledgeBase};

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

#[test]
fn argmax_frequency_matches_softmax() {
    let logits = [1.5, 0.0, -1.0, 0.5];
    let n = 40_000;
    let s = gumbel_summary(&logits, 0.5, n, 11).unwrap();
    let p = softmax(&logits);
    for (got, want) in s.probs.iter().zip(&p) {
        assert!((got - want).abs() < 1e-12);
    }
    for (f, q) in s.argmax_freq.iter().zip(&p) {
        let sd = (q * (1.0 - q) / n as f64).sqrt();
        assert!((f - q).abs() < 4.0 * sd, "{f} vs {q}");
    }
    assert_eq!(s.draws.len(), 5);
    for d in &s.draws {
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn temperature_controls_sharpness() {
    let logits = [2.0, 0.0, 0.0];
    let cold = gumbel_summary(&logits, 0.05, 2000, 1).unwrap();
    let hot = gumbel_summary(&logits, 50.0, 2000, 1).unwrap();
    assert!(cold.mean_max > 0.97, "{}", cold.mean_max);
    assert!(hot.mean.iter().all(|m| (m - 1.0 / 3.0).abs() < 0.02), "{:?}", hot.mean);
    let again = gumbel_summary(&logits, 0.05, 2000, 1).unwrap();
    assert_eq!(cold.mean, again.mean);
}

#[test]
fn gumbel_rejects_bad_input() {
    assert!(gumbel_summary(&[], 1.0, 10, 0).is_err());
    assert!(gumbel_summary(&[1.0, f64::NAN], 1.0, 10, 0).is_err());
    assert!(gumbel_summary(&[1.0, 2.0], 0.0, 10, 0).is_err());
    assert!(gumbel_summary(&[1.0, 2.0], 1.0, 0, 0).is_err());
}

const KB: &str = "the eiffel tower in paris was completed in 1889 for the world fair
mount everest rises above the himalaya border between nepal and tibet
honey bees communicate through a waggle dance";

#[test]
fn search_ranks_by_score() {
    let kb = KnowledgeBase::from_text(KB, false).unwrap();
    assert_eq!(kb.len(), 3);
    let hits = kb.hits("where is the eiffel tower", 3);
    assert_eq!(hits[0].id, 0);
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(hits[0].sim > 0.0);
    let json: serde_json::Value = serde_json::from_str(&kb.search("waggle dance", 2)).unwrap();
    assert_eq!(json[0]["id"], 2);
    assert!(KnowledgeBase::from_text("  \n ", false).is_err());
    assert_eq!(KnowledgeBase::from_text("One here. Two here.", true).unwrap().len(), 2);
}

#[test]
fn filter_checker_names_the_failing_rule() {
    let kb = KnowledgeBase::from_text(KB, false).unwrap();
    let cases = [
        ("i like that a lot", "rule1"),
        ("eiffel tower paris completed 1889 world fair honey bees waggle dance nepal", "rule2"),
        ("paris tower fair world the the the the a a a a", "rule3"),
        ("i think my cat is so happy when she can sleep on it all day", "rule4"),
        ("i read that honey bees communicate through a waggle dance and it amazed me", "rule5"),
        ("the eiffel tower in paris was completed in 1889 for the world fair", "accepted"),
    ];
    for (r, want) in cases {
        let c = kb.filter_check(r);
        assert_eq!(c.outcome, want, "{r}");
    }
    let c = kb.filter_check(cases[5].0);
    assert_eq!(c.best_sim, 1.0);
    assert_eq!(c.best_knowledge_len, 13);
    assert_eq!(c.tokens, 13);
    let v: serde_json::Value = serde_json::from_str(&kb.check(cases[4].0)).unwrap();
    assert_eq!(v["outcome"], "rule5");
    assert_eq!(v["thresholds"]["length"][0], 10);
}
