use ndarray::Array2;
use shrdlurn::blockworld::{grammar_vocabulary, Instruction, Utterance, WorldState};
use shrdlurn::datagen::{generate, make_split, Counts};
use shrdlurn::neural::{
    checkpoint, Architecture, DecoderKind, Dropout, EncodedExample, EncoderKind, ModelBundle, TrainMask, Vocabulary,
};

fn vocab() -> Vocabulary {
    let mut v = Vocabulary::new(grammar_vocabulary()).unwrap();
    v.freeze();
    v
}

fn examples<T: shrdlurn::Scalar>(model: &ModelBundle<T>, n: usize) -> Vec<EncodedExample> {
    let split = make_split(1);
    let data = generate(
        &split,
        Counts {
            train: n,
            val: 0,
            test: 0,
        },
    );
    data.train
        .examples
        .iter()
        .map(|e| model.encode_example(&e.utterance, &e.start, &e.target).unwrap())
        .collect()
}

fn loss(model: &ModelBundle<f64>, batch: &[&EncodedExample]) -> f64 {
    let mask = TrainMask::none(model.params());
    model.loss_and_grads(batch, &mask, &mut Dropout::off()).0
}

#[test]
fn finite_difference_gradients_for_every_pair() {
    for (enc, dec) in Architecture::all_pairs() {
        let arch = Architecture::new(enc, dec, 4);
        let mut model = ModelBundle::<f64>::new(arch, vocab(), 3).unwrap();
        // Larger weights make the check less trivial than at init scale.
        for (_, p) in model.params_mut().iter_mut() {
            p.value.mapv_inplace(|v| v * 5.0);
        }
        let exs = examples(&model, 3);
        let batch: Vec<&EncodedExample> = exs.iter().collect();
        let mask = TrainMask::all(model.params());
        let (_, grads) = model.loss_and_grads(&batch, &mask, &mut Dropout::off());

        let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for id in ids {
            let shape = model.params().value(id).dim();
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Array2::zeros(shape));
            let mut numeric = Array2::<f64>::zeros(shape);
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = model.params().value(id)[[r, c]];
                    model.params_mut().get_mut(id).value[[r, c]] = orig + eps;
                    let up = loss(&model, &batch);
                    model.params_mut().get_mut(id).value[[r, c]] = orig - eps;
                    let down = loss(&model, &batch);
                    model.params_mut().get_mut(id).value[[r, c]] = orig;
                    numeric[[r, c]] = (up - down) / (2.0 * eps);
                }
            }
            let diff = (&analytic - &numeric).mapv(|v| v * v).sum().sqrt();
            let scale = analytic.mapv(|v| v * v).sum().sqrt() + numeric.mapv(|v| v * v).sum().sqrt();
            if scale > 1e-10 {
                let rel = diff / scale;
                assert!(
                    rel <= 1e-4,
                    "{}: tensor {} relative error {rel:e}",
                    arch.name(),
                    model.params().get(id).name
                );
                worst = worst.max(rel);
            }
        }
        println!("{}: worst relative error {worst:e}", arch.name());
    }
}

#[test]
fn shapes_and_normalization_across_lengths() {
    for (enc, dec) in Architecture::all_pairs() {
        let model = ModelBundle::<f32>::new(Architecture::new(enc, dec, 8), vocab(), 0).unwrap();
        for len in 1..=12 {
            let words: Vec<String> = (0..len).map(|i| grammar_vocabulary()[i % 19].to_string()).collect();
            let pred = model.predict(&Utterance::new(words), &WorldState::empty()).unwrap();
            assert_eq!(pred.probs.dim(), (23, 6));
            assert_eq!(pred.tokens.len(), 23);
            for row in pred.probs.rows() {
                assert!(row.iter().all(|p| *p >= 0.0));
                assert!((row.sum() - 1.0).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn untrained_model_is_near_uniform() {
    let model =
        ModelBundle::<f64>::new(Architecture::new(EncoderKind::Conv, DecoderKind::Conv, 16), vocab(), 0).unwrap();
    let exs = examples(&model, 50);
    let batch: Vec<&EncodedExample> = exs.iter().collect();
    let l = loss(&model, &batch);
    assert!((l - 6f64.ln()).abs() < 0.1, "initial loss {l}");
}

#[test]
fn untrained_accuracy_on_random_targets_is_chance() {
    use rand::{Rng, SeedableRng};
    let model =
        ModelBundle::<f32>::new(Architecture::new(EncoderKind::Lstm, DecoderKind::Conv, 16), vocab(), 5).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut exs = examples(&model, 1000);
    let (mut hits, mut total) = (0usize, 0usize);
    for ex in &mut exs {
        ex.target = std::array::from_fn(|_| rng.gen_range(0..6));
        let pred = model.predict_encoded(ex);
        hits += pred.tokens.iter().zip(&ex.target).filter(|(p, t)| p == t).count();
        total += ex.target.len();
    }
    let acc = hits as f64 / total as f64;
    assert!((acc - 1.0 / 6.0).abs() <= 0.02, "token accuracy {acc}");
}

#[test]
fn unknown_word_is_rejected() {
    let model =
        ModelBundle::<f32>::new(Architecture::new(EncoderKind::Lstm, DecoderKind::Lstm, 4), vocab(), 0).unwrap();
    assert!(model
        .predict(&Utterance::from_text("add roze at 1st tile"), &WorldState::empty())
        .is_err());
    assert!(model.predict(&Utterance::new(vec![]), &WorldState::empty()).is_err());
}

#[test]
fn bag_of_words_singleton_is_the_embedding() {
    let model = ModelBundle::<f64>::new(Architecture::new(EncoderKind::Bow, DecoderKind::Lstm, 8), vocab(), 2).unwrap();
    let enc = model.encode(&Utterance::from_text("cyan")).unwrap();
    assert_eq!(enc.states.row(0), model.word_embedding("cyan").unwrap());
    // Order does not matter for a bag of words.
    let a = model.encode(&Utterance::from_text("add red at 1st tile")).unwrap();
    let b = model.encode(&Utterance::from_text("tile 1st at red add")).unwrap();
    assert!((&a.states - &b.states).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn conv_encoder_has_bounded_receptive_field() {
    let model =
        ModelBundle::<f64>::new(Architecture::new(EncoderKind::Conv, DecoderKind::Conv, 8), vocab(), 2).unwrap();
    // Four kernel-3 layers see four tokens on each side.
    let a = model
        .encode(&Utterance::from_text("add red at 1st tile add red at 1st tile"))
        .unwrap();
    let b = model
        .encode(&Utterance::from_text("remove red at 1st tile add red at 1st tile"))
        .unwrap();
    for r in 0..10 {
        let same = a.states.row(r) == b.states.row(r);
        assert_eq!(same, r >= 5, "row {r}");
    }
}

#[test]
fn attention_rows_are_convex() {
    for (enc, dec) in Architecture::all_pairs() {
        let model = ModelBundle::<f64>::new(Architecture::new(enc, dec, 8), vocab(), 4).unwrap();
        let ex = &examples(&model, 1)[0];
        let w = model.attention_weights(ex);
        let m = if enc == EncoderKind::Bow { 1 } else { ex.words.len() };
        assert_eq!(w.dim(), (23, m));
        for row in w.rows() {
            assert!(row.iter().all(|p| *p >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn registering_words_keeps_old_behaviour() {
    let mut model =
        ModelBundle::<f32>::new(Architecture::new(EncoderKind::Conv, DecoderKind::Conv, 8), vocab(), 1).unwrap();
    let utt = Instruction::all()[17].utterance();
    let state = WorldState::empty();
    let before = model.predict(&utt, &state).unwrap().probs;
    let old_rows = model.params().value(model.word_embedding_id()).clone();

    let ids = model.register_new_words(&["roze", "braun"], 9).unwrap();
    assert_eq!(ids, vec![19, 20]);
    assert_eq!(model.vocabulary().offline_size(), 19);
    let table = model.params().value(model.word_embedding_id());
    assert_eq!(table.dim(), (21, 8));
    assert_eq!(table.slice(ndarray::s![..19, ..]), old_rows);
    assert!(table.slice(ndarray::s![19.., ..]).iter().all(|v| v.abs() <= 0.1));
    assert_eq!(model.predict(&utt, &state).unwrap().probs, before);

    assert!(model.register_new_words(&["roze"], 0).is_err());
    assert!(model.register_new_words(&["red"], 0).is_err());
    assert!(model.register_new_words(&["x", "x"], 0).is_err());
}

#[test]
fn checkpoint_reload_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (enc, dec) in Architecture::all_pairs() {
        let mut model = ModelBundle::<f32>::new(Architecture::new(enc, dec, 8), vocab(), 6).unwrap();
        model.register_new_words(&["evr"], 1).unwrap();
        let path = dir.path().join(format!("{}.json", model.architecture().name()));
        checkpoint::save(&model, &path).unwrap();
        let loaded: ModelBundle<f32> = checkpoint::load(&path).unwrap();
        assert_eq!(loaded.vocabulary().words(), model.vocabulary().words());
        assert_eq!(loaded.vocabulary().offline_size(), 19);
        let utt = Utterance::from_text("add evr at 2nd tile");
        let state: WorldState = WorldState::empty();
        assert_eq!(
            loaded.predict(&utt, &state).unwrap().probs,
            model.predict(&utt, &state).unwrap().probs
        );
        // Loading at the wrong precision is an error, not a silent cast.
        assert!(checkpoint::load::<f64>(&path).is_err());
    }
}
