use xlrs_core::diagnostics::train_lid;
use xlrs_core::model::{greedy_generate_batch, init_params, loss_and_grads, Example, ModelParams, TransformerConfig};
use xlrs_core::synthlang::{
    build_vocab, cast_many, generate_parallel_corpus, make_family, strip_sentinels, LanguageParams, OrderRule,
    ParallelCorpus, Split, TaskInstance, TaskKind, TaskOptions, Vocab,
};
use xlrs_core::train::{
    adam_step, checkpoint_steps, denoise_examples, encode_instance, finetune, load_checkpoint, mean_loss, mix_sources,
    pretrain_span_denoise, resume_finetune, save_checkpoint, Checkpoint, OptimizerState, Provenance, TrainConfig,
    TrainError,
};

struct Setup {
    corpus: ParallelCorpus,
    vocab: Vocab,
}

fn setup(n: usize) -> Setup {
    let specs: Vec<LanguageParams> = [
        ("en", 0, OrderRule::Identity),
        ("de", 1, OrderRule::VerbFinal),
        ("ru", 2, OrderRule::Reverse),
    ]
    .iter()
    .map(|&(l, a, o)| LanguageParams {
        lang_id: l.into(),
        alphabet_id: a,
        order_rule: o,
        lexical_overlap: 0.0,
    })
    .collect();
    let family = make_family(3, 60, &specs).unwrap();
    let corpus = generate_parallel_corpus(&family, n, 3).unwrap();
    let vocab = build_vocab(&corpus);
    Setup { corpus, vocab }
}

fn small_model(vocab: &Vocab, seed: u64) -> ModelParams {
    let cfg = TransformerConfig {
        d_model: 32,
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_ff: 64,
        vocab_size: vocab.len(),
        max_len: 64,
        dropout_rate: 0.1,
    };
    init_params(&cfg, seed).unwrap()
}

fn cfg(lr: f64, epochs: usize, budget: usize, every: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: lr,
        batch_size: 16,
        epochs,
        train_budget: budget,
        checkpoint_every: every,
        seed: 11,
    }
}

fn instances(s: &Setup, task: TaskKind, lang: &str, split: Split) -> Vec<TaskInstance> {
    cast_many(&s.corpus, &s.corpus.indices(split), task, lang, &TaskOptions::default())
        .unwrap()
        .0
}

fn provenance() -> Provenance {
    Provenance {
        stage: "finetune".into(),
        task: Some(TaskKind::GenSum),
        source_langs: vec!["en".into()],
    }
}

#[test]
fn pretraining_halves_heldout_loss_and_stays_in_language() {
    let s = setup(300);
    let p = small_model(&s.vocab, 0);
    let heldout = denoise_examples(&s.vocab, &s.corpus, Split::Dev, 5);
    let before = mean_loss(&p, &heldout, 64).unwrap();
    let run = pretrain_span_denoise(p, &s.corpus, &s.vocab, &cfg(3e-3, 100, 16 * 2500, 100)).unwrap();
    assert_eq!(run.log.len(), 2500);
    let after = mean_loss(&run.params, &heldout, 64).unwrap();
    assert!(after < 0.5 * before, "held-out loss {before} -> {after}");

    // Only spans whose reference is itself identifiable (not empty, not
    // purely shared numerals or names) can be judged by the LID oracle.
    let lid = train_lid(&s.corpus, 2).unwrap();
    let langs = s.corpus.family.lang_ids();
    let per_lang = heldout.len() / langs.len();
    let text = |ids: &[usize]| strip_sentinels(&s.vocab.decode(ids));
    let judged: Vec<(usize, &Example)> = heldout
        .iter()
        .enumerate()
        .filter(|(i, e)| lid.predict(&text(&e.target)) == Some(langs[i / per_lang].as_str()))
        .collect();
    assert!(judged.len() >= heldout.len() / 2);
    let inputs: Vec<Vec<usize>> = judged.iter().map(|(_, e)| e.input.clone()).collect();
    let outputs = greedy_generate_batch(&run.params, &inputs, 24).unwrap();
    let in_language = judged
        .iter()
        .zip(&outputs)
        .filter(|((i, _), ids)| lid.predict(&text(ids)) == Some(langs[i / per_lang].as_str()))
        .count();
    let frac = in_language as f64 / outputs.len() as f64;
    assert!(frac >= 0.9, "only {frac} of reconstructions in the input language");
}

#[test]
fn pretraining_budget_below_one_batch_is_an_error() {
    let s = setup(120);
    let p = small_model(&s.vocab, 0);
    let err = pretrain_span_denoise(p, &s.corpus, &s.vocab, &cfg(1e-3, 1, 8, 10)).unwrap_err();
    assert!(matches!(
        err,
        TrainError::BudgetTooSmall {
            budget: 8,
            batch_size: 16
        }
    ));
}

#[test]
fn default_schedule_arithmetic() {
    let c = TrainConfig::default();
    let per_epoch = c.steps_per_epoch(10_000);
    assert_eq!(per_epoch, 313);
    let total = c.epochs * per_epoch;
    assert_eq!(total, 3130);
    let steps = checkpoint_steps(total, per_epoch, c.checkpoint_every);
    assert!(steps.len() >= 10);
    assert_eq!(steps.first(), Some(&0));
    assert_eq!(steps.last(), Some(&3130));
    for e in 1..=10 {
        assert!(steps.contains(&(e * 313)));
    }
}

#[test]
fn fixed_budget_across_one_and_two_sources() {
    let s = setup(300);
    let en = instances(&s, TaskKind::GenSum, "en", Split::Train);
    let de = instances(&s, TaskKind::GenSum, "de", Split::Train);
    let one = mix_sources(&[("en".into(), en.clone())], 200, 1).unwrap();
    let two = mix_sources(&[("en".into(), en), ("de".into(), de)], 200, 1).unwrap();
    assert_eq!(one.instances.len(), 200);
    assert_eq!(two.instances.len(), 200);
    assert_eq!(two.instances.iter().filter(|i| i.lang == "de").count(), 100);
}

#[test]
fn finetune_is_deterministic_emits_schedule_and_lowers_dev_loss() {
    let s = setup(300);
    let train = instances(&s, TaskKind::GenSum, "en", Split::Train);
    let dev: Vec<Example> = instances(&s, TaskKind::GenSum, "en", Split::Dev)
        .iter()
        .map(|i| encode_instance(&s.vocab, i))
        .collect();
    let mix = mix_sources(&[("en".into(), train)], 160, 2).unwrap();
    let c = cfg(3e-3, 4, 160, 7);
    let run = |seed| {
        let mut cks = Vec::new();
        let mut rows = Vec::new();
        let r = finetune(
            small_model(&s.vocab, seed),
            &mix,
            &s.vocab,
            &c,
            provenance(),
            None,
            |ev| {
                cks.push(ev.checkpoint.clone());
                rows.extend_from_slice(ev.log);
                Ok(())
            },
        )
        .unwrap();
        (r, cks, rows)
    };
    let (a, cks, rows) = run(4);
    let (b, _, _) = run(4);
    assert_eq!(a.final_checkpoint.params, b.final_checkpoint.params);
    assert_eq!(a.log, b.log);
    assert_eq!(rows, a.log);

    assert_eq!(a.total_steps, 40);
    let steps: Vec<usize> = cks.iter().map(|c| c.step).collect();
    assert_eq!(steps, checkpoint_steps(40, 10, 7));

    let at = |step| &cks.iter().find(|c| c.step == step).unwrap().params;
    let epoch1 = mean_loss(at(10), &dev, 64).unwrap();
    let last = mean_loss(at(40), &dev, 64).unwrap();
    assert!(last < epoch1, "dev loss {epoch1} -> {last}");
}

#[test]
fn resume_from_saved_checkpoint_is_continuous() {
    let s = setup(300);
    let train = instances(&s, TaskKind::GenTitle, "en", Split::Train);
    let mix = mix_sources(&[("en".into(), train)], 96, 2).unwrap();
    let c = cfg(1e-3, 3, 96, 5);
    let mut cks = Vec::new();
    let full = finetune(small_model(&s.vocab, 1), &mix, &s.vocab, &c, provenance(), None, |ev| {
        cks.push(ev.checkpoint.clone());
        Ok(())
    })
    .unwrap();
    let mid = cks.iter().find(|ck| ck.step == 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.xlck");
    save_checkpoint(mid, &path).unwrap();
    let loaded: Checkpoint = load_checkpoint(&path).unwrap();
    assert_eq!(&loaded, mid);

    let resumed = resume_finetune(loaded, &mix, &s.vocab, None, |_| Ok(())).unwrap();
    assert_eq!(resumed.log.first().unwrap().step, 11);
    for r in &resumed.log {
        let u = &full.log[r.step - 1];
        assert!(
            (r.loss - u.loss).abs() < 1e-9,
            "step {}: {} vs {}",
            r.step,
            r.loss,
            u.loss
        );
    }
    assert_eq!(resumed.final_checkpoint.params, full.final_checkpoint.params);

    let done = full.final_checkpoint.clone();
    assert!(resume_finetune(done, &mix, &s.vocab, None, |_| Ok(()))
        .unwrap()
        .log
        .is_empty());
}

#[test]
fn nan_parameters_abort_with_the_offending_row() {
    let s = setup(200);
    let train = instances(&s, TaskKind::GenSum, "en", Split::Train);
    let mix = mix_sources(&[("en".into(), train)], 32, 0).unwrap();
    let mut p = small_model(&s.vocab, 0);
    let mut flat = p.to_flat();
    flat.iter_mut().for_each(|x| *x = f64::NAN);
    p.set_flat(&flat).unwrap();
    match finetune(p, &mix, &s.vocab, &cfg(1e-3, 1, 32, 10), provenance(), None, |_| Ok(())) {
        Err(TrainError::NonFiniteLoss(row)) => {
            assert_eq!(row.step, 1);
            assert!(row.loss.is_nan());
            assert_eq!(row.source_langs, vec!["en".to_string()]);
        }
        other => panic!(
            "expected a non-finite loss error, got {:?}",
            other.map(|r| r.total_steps)
        ),
    }
}

#[test]
fn repeated_batch_loss_decreases_monotonically() {
    let s = setup(200);
    let batch: Vec<Example> = instances(&s, TaskKind::GenSum, "en", Split::Train)
        .iter()
        .take(8)
        .map(|i| encode_instance(&s.vocab, i))
        .collect();
    let mut p = small_model(&s.vocab, 9);
    let mut opt = OptimizerState::new(&p);
    let mut losses = Vec::new();
    for _ in 0..50 {
        let (loss, grads) = loss_and_grads(&p, &batch, None).unwrap();
        losses.push(loss);
        adam_step(&mut p, &grads, &mut opt, 1e-3).unwrap();
    }
    let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(
        decreasing as f64 >= 0.9 * 49.0,
        "{decreasing}/49 decreasing: {losses:?}"
    );
}
