mod common;

use common::{same_bits, small_config};
use mtts_core::config::Config;
use mtts_core::corpus::{batch_iter, synth_corpus, Split};
use mtts_core::discriminator::{Discriminator, DiscriminatorConfig};
use mtts_core::speaker::{cosine, SpeakerEncoder};
use mtts_core::tensor::{Tape, Tensor};
use mtts_core::trainer::Trainer;

#[test]
fn embeddings_separate_speakers() {
    let ds = synth_corpus(&Config::default().corpus).unwrap();
    let enc = SpeakerEncoder::new(32, 11);
    let z: Vec<(usize, Vec<f64>)> = ds.items.iter().map(|i| (i.speaker, enc.embed(&i.mel).unwrap().0)).collect();
    let (mut same, mut cross) = ((0.0, 0usize), (0.0, 0usize));
    for (a, (sa, za)) in z.iter().enumerate() {
        for (sb, zb) in &z[a + 1..] {
            let c = cosine(za, zb);
            let slot = if sa == sb { &mut same } else { &mut cross };
            slot.0 += c;
            slot.1 += 1;
        }
    }
    let (same, cross) = (same.0 / same.1 as f64, cross.0 / cross.1 as f64);
    // measured on the default corpus: same 0.943, cross 0.075
    assert!(same > cross + 0.5, "same-speaker {same:.4}, cross-speaker {cross:.4}");
}

#[test]
fn default_epoch_has_no_same_speaker_pairs() {
    let ds = synth_corpus(&Config::default().corpus).unwrap();
    for epoch_seed in 0..5 {
        for b in batch_iter(&ds, Split::Train, 8, epoch_seed).unwrap() {
            for m in 0..4 {
                assert_ne!(ds.items[b[m]].speaker, ds.items[b[7 - m]].speaker);
            }
        }
    }
}

#[test]
fn critic_gradient_reaches_the_trunk() {
    let cfg = DiscriminatorConfig::default();
    let d = Discriminator::new(cfg, 32, 5);
    let mel = Tensor::new(vec![80, 24], (0..80 * 24).map(|i| ((i * 31) % 17) as f64 / 8.0 - 1.0).collect()).unwrap();
    let critic = |d: &Discriminator| {
        let mut tape = Tape::new();
        let x = tape.constant(mel.clone());
        let trunk = d.shared_forward(&mut tape, x, &[24]).unwrap();
        let a = d.critic_head(&mut tape, &trunk).unwrap();
        (tape.value(a).item(), tape, a)
    };
    let mut d = d;
    let (_, tape, a) = critic(&d);
    tape.backward(a, &mut [&mut d.params]).unwrap();
    let id = d.params.id("shared.0.weight").unwrap();
    let grad = d.params.get(id).grad.clone();
    let (idx, &g) = grad
        .data()
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.abs().total_cmp(&y.1.abs()))
        .unwrap();
    assert!(g.abs() > 1e-6, "critic gradient into the trunk is {g}");
    let h = 1e-5;
    let probe = |delta: f64| {
        let mut e = d.clone();
        e.params.get_mut(id).value.data_mut()[idx] += delta;
        critic(&e).0
    };
    let fd = (probe(h) - probe(-h)) / (2.0 * h);
    assert!((fd - g).abs() <= 1e-6 * g.abs().max(1e-3), "analytic {g} vs finite difference {fd}");
}

#[test]
fn segmented_conv_equals_separate_convs() {
    let lens = [5usize, 9, 6];
    let total: usize = lens.iter().sum();
    let x = Tensor::new(vec![3, total], (0..3 * total).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let w = Tensor::new(vec![4, 3, 5], (0..60).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let b = Tensor::new(vec![4], vec![0.1, -0.2, 0.3, 0.0]).unwrap();
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
    let (packed, out_lens) = tape.conv1d_segments(xv, wv, Some(bv), 2, 2, &lens).unwrap();
    let packed = tape.value(packed).clone();
    let n_out: usize = out_lens.iter().sum();
    let mut off_in = 0;
    let mut off_out = 0;
    for (&l, &lo) in lens.iter().zip(&out_lens) {
        let part = common::columns(&x, off_in, l);
        let mut t = Tape::new();
        let (pv, wv, bv) = (t.constant(part), t.constant(w.clone()), t.constant(b.clone()));
        let single = t.conv1d(pv, wv, Some(bv), 2, 2).unwrap();
        let single = t.value(single);
        assert_eq!(single.shape(), &[4, lo]);
        for r in 0..4 {
            for c in 0..lo {
                assert_eq!(single.data()[r * lo + c], packed.data()[r * n_out + off_out + c]);
            }
        }
        off_in += l;
        off_out += lo;
    }
}

#[test]
fn pretraining_freezes_discriminator_and_evaluation_is_pure() {
    let cfg = small_config();
    let ds = synth_corpus(&cfg.corpus).unwrap();
    let mut t = Trainer::new(cfg.clone()).unwrap();
    let d0 = t.discriminator.params.clone();
    let enc0 = t.encoder.params.clone();
    let mut trace = Vec::new();
    while t.step() < cfg.train.pretrain_steps {
        let (_, r) = t.train_step(&ds).unwrap();
        assert_eq!(r.l_gan_d, 0.0);
        trace.push(r);
    }
    assert!(same_bits(&t.discriminator.params, &d0));
    let g = t.generator.params.clone();
    let e1 = t.evaluate(&ds, Split::Val).unwrap();
    let e2 = t.evaluate(&ds, Split::Val).unwrap();
    assert_eq!(e1, e2);
    assert!(same_bits(&t.generator.params, &g) && same_bits(&t.discriminator.params, &d0));
    while t.step() < t.total_steps() {
        t.train_step(&ds).unwrap();
    }
    assert!(same_bits(&t.encoder.params, &enc0));
    assert!(!same_bits(&t.discriminator.params, &d0));
    // the same seed replays the same pretraining trace
    let mut u = Trainer::new(cfg.clone()).unwrap();
    for r in &trace {
        assert_eq!(u.train_step(&ds).unwrap().1, *r);
    }
}
