use super::*;
use crate::tensor::gradcheck::{check_inputs, check_params};

fn tiny(std: f64) -> (Nets, ParamStore) {
    Nets::init(NetConfig {
        vocab_size: 40,
        hidden: 16,
        heads: 2,
        layers: 2,
        max_input_len: 48,
        max_output_len: 6,
        init_std: std,
        seed: 5,
    })
    .unwrap()
}

fn sample_input(response: &[u32]) -> PackedInput {
    pack_input(
        &[vec![20, 21, 22]],
        &[vec![30, 31], vec![32, 33, 34]],
        Some(response),
        Some(4),
        48,
        6,
    )
    .unwrap()
}

fn logits(nets: &Nets, p: &ParamStore, input: &PackedInput) -> Tensor {
    (*nets.generator_logits(&Graph::inference(), p, input).unwrap().value()).clone()
}

#[test]
fn logits_normalize() {
    let (nets, p) = tiny(0.3);
    let l = logits(&nets, &p, &sample_input(&[25, 26, 27]));
    assert_eq!(l.shape(), &[5, 40]);
    for r in 0..l.rows() {
        let row = l.row_slice(r);
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        let s: f64 = row.iter().map(|x| (x - m).exp() / z).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn response_is_causal() {
    let (nets, p) = tiny(0.3);
    let a = logits(&nets, &p, &sample_input(&[25, 26, 27, 28]));
    for t in 0..4 {
        let mut r = vec![25, 26, 27, 28];
        r[t] = 39;
        let b = logits(&nets, &p, &sample_input(&r));
        for row in 0..=t {
            assert_eq!(a.row_slice(row), b.row_slice(row), "edit at {t} leaked into row {row}");
        }
        assert_ne!(a.row_slice(t + 1), b.row_slice(t + 1));
    }
}

#[test]
fn knowledge_padding_is_invisible() {
    let (nets, p) = tiny(0.3);
    let plain = sample_input(&[25, 26]);
    let mut padded = plain.clone();
    padded.insert_padding(plain.knowledge_span.0 + 1, 3).unwrap();
    assert_eq!(logits(&nets, &p, &plain), logits(&nets, &p, &padded));
}

#[test]
fn next_logits_match_last_row() {
    let (nets, p) = tiny(0.3);
    let input = sample_input(&[25, 26]);
    let full = logits(&nets, &p, &input);
    let next = nets.next_logits(&Graph::inference(), &p, &input).unwrap().value();
    assert_eq!(next.data(), full.row_slice(full.rows() - 1));
}

#[test]
fn soft_decoding_with_one_hot_matches_hard() {
    let (nets, p) = tiny(0.3);
    let input = sample_input(&[25, 26]);
    let g = Graph::inference();
    let table = nets.token_table(&g, &p);
    let mut rows = Vec::new();
    for &t in &input.response()[..2] {
        let mut w = vec![0.0; 40];
        w[t as usize] = 1.0;
        rows.push(g.constant(Tensor::row(w)).matmul(table).unwrap());
    }
    let mut partial = input.prefix();
    partial.push_response(25);
    partial.push_response(26);
    let hard = nets.next_logits(&g, &p, &partial).unwrap().value();
    let soft = nets.next_logits_soft(&g, &p, &input, &rows).unwrap().value();
    assert_eq!(hard.data(), soft.data());

    let hard_audit = nets.alpha_audit(&g, &p, nets.token_rows(&g, &p, &[25, 26]).unwrap()).unwrap();
    let soft_audit = nets
        .alpha_audit(&g, &p, Var::concat_rows(&rows).unwrap())
        .unwrap();
    assert_eq!(hard_audit.item(), soft_audit.item());
    assert!(hard_audit.item() > 0.0 && hard_audit.item() < 1.0);
}

#[test]
fn scalar_heads_are_bounded_and_deterministic() {
    let (nets, p) = tiny(0.3);
    let enc = EncoderInput::context_knowledge(&[vec![20, 21]], &[&[30, 31]], 48);
    let a = nets.selector_prob(&p, &enc).unwrap();
    assert!(a > 0.0 && a < 1.0);
    assert_eq!(a, nets.selector_prob(&p, &enc).unwrap());
    let g = Graph::inference();
    let al = nets.alpha_predict(&g, &p, &enc).unwrap().item();
    assert!(al > 0.0 && al < 1.0);
    let m = EncoderInput::matcher(&[vec![20]], &[25], &[30], 48);
    let s1 = nets.matcher_score(&g, &p, &m).unwrap().item();
    let s2 = nets.matcher_score(&Graph::inference(), &p, &m).unwrap().item();
    assert!(s1.is_finite());
    assert_eq!(s1, s2);
    let (_, p2) = tiny(0.3);
    assert_eq!(a, nets.selector_prob(&p2, &enc).unwrap());
}

#[test]
fn oversized_input_is_rejected() {
    let (nets, p) = tiny(0.3);
    let long: Vec<u32> = (0..60).map(|i| 16 + i % 20).collect();
    let enc = EncoderInput { segments: vec![0; long.len()], ids: long };
    assert!(matches!(
        nets.matcher_score(&Graph::inference(), &p, &enc),
        Err(Error::Contract(_))
    ));
}

#[test]
fn readout_is_untied_and_embeddings_shared() {
    let (nets, p) = tiny(0.02);
    let tok = p.id("emb.tok").unwrap();
    let out = p.id("gen.readout.w").unwrap();
    assert_ne!(tok, out);
    assert_eq!(p.value(tok).shape(), &[40, 16]);
    assert_eq!(p.value(out).shape(), &[16, 40]);
    // One token table only.
    let tables = p.iter().filter(|(_, t)| t.shape() == [40, 16]).count();
    assert_eq!(tables, 1);
    for prefix in ["match.l", "alpha.l", "audit.l"] {
        let layers: std::collections::BTreeSet<&str> = p
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(prefix))
            .map(|rest| rest.split('.').next().unwrap())
            .filter(|l| l.chars().all(|c| c.is_ascii_digit()))
            .collect();
        assert_eq!(layers.len(), AUX_LAYERS, "{prefix}");
    }
    let h = 16;
    let per_layer = 4 * h * h + h + 2 * 2 * h + h * 4 * h + 4 * h + 4 * h * h + h;
    let expected = 40 * h
        + 48 * h
        + 3 * h
        + (2 + 3 * AUX_LAYERS) * per_layer
        + 4 * 2 * h
        + (h * 40 + 40)
        + 4 * (h + 1);
    assert_eq!(p.num_scalars(), expected);
    let _ = nets;
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let texts = ["alpha beta gamma", "beta gamma delta"];
    let vocab = Vocab::build(texts.iter().copied(), 64, 1).unwrap();
    let cfg = NetConfig {
        hidden: 16,
        heads: 2,
        layers: 1,
        max_input_len: 32,
        max_output_len: 4,
        ..NetConfig::default()
    };
    let model = Model::new(cfg, vocab).unwrap();
    model.save(dir.path()).unwrap();
    let back = Model::load(dir.path()).unwrap();
    for ((n1, t1), (n2, t2)) in model.params.iter().zip(back.params.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1, t2);
    }
    let manifest = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(manifest.contains("gen.readout.w\t16x"));
}

const TOL: f64 = 1e-4;

fn assert_fd(name: &str, res: crate::tensor::gradcheck::GradCheck) {
    assert!(res.checked > 0, "{name}: nothing checked");
    assert!(res.max_rel_error < TOL, "{name}: rel error {}", res.max_rel_error);
}

#[test]
fn fd_generator() {
    let (nets, p) = tiny(0.3);
    let input = sample_input(&[25, 26, 27]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for prefix in ["gen.", "emb."] {
        let r = check_params(&p, prefix, 3, &mut rng, |g, p| Ok(nets.response_nll(g, p, &input)?.0)).unwrap();
        assert_fd(prefix, r);
    }
}

#[test]
fn fd_scalar_heads() {
    let (nets, p) = tiny(0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let enc = EncoderInput::context_knowledge(&[vec![20, 21]], &[&[30, 31, 32]], 48);
    let m = EncoderInput::matcher(&[vec![20, 21]], &[25, 26], &[30, 31], 48);
    let r = check_params(&p, "sel.", 4, &mut rng, |g, p| nets.selector_logit(g, p, &enc)).unwrap();
    assert_fd("selector head", r);
    let r = check_params(&p, "gen.l0.", 2, &mut rng, |g, p| {
        Ok(nets.selector_logit(g, p, &enc)?.log_sigmoid())
    })
    .unwrap();
    assert_fd("selector backbone", r);
    let r = check_params(&p, "match.", 2, &mut rng, |g, p| nets.matcher_score(g, p, &m)).unwrap();
    assert_fd("matcher", r);
    let r = check_params(&p, "alpha.", 2, &mut rng, |g, p| nets.alpha_predict(g, p, &enc)).unwrap();
    assert_fd("alpha predictor", r);
    let r = check_params(&p, "audit.", 2, &mut rng, |g, p| {
        nets.alpha_audit(g, p, nets.token_rows(g, p, &[25, 26, 27])?)
    })
    .unwrap();
    assert_fd("auditor", r);
}

#[test]
fn fd_soft_embedding_weights() {
    let (nets, p) = tiny(0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = rand_distr::Distribution::sample_iter(rand_distr::StandardNormal, &mut rng)
        .take(80)
        .collect::<Vec<f64>>();
    let w = Tensor::matrix(2, 40, w).unwrap();
    let r = check_inputs(&[w], |g, x| {
        let mix = x[0].softmax().matmul(nets.token_table(g, &p))?;
        nets.alpha_audit(g, &p, mix)
    })
    .unwrap();
    assert_fd("mixture weights", r);
    let g = Graph::new();
    let x = g.input(Tensor::filled(&[2, 40], 0.1));
    let out = nets.alpha_audit(&g, &p, x.softmax().matmul(nets.token_table(&g, &p)).unwrap()).unwrap();
    let grads = g.backward(out).unwrap();
    assert!(grads.wrt(x).unwrap().iter().any(|v| v.abs() > 1e-8));
}
