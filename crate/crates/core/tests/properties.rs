use nlsal_core::data::{synth_dataset, SynthSpec};
use nlsal_core::nets::{nl_name, static_forward, Network, NetworkSpec};
use nlsal_core::nonlocal::{nl_block, NonLocalParams};
use nlsal_core::train::{static_samples, train_stage, TrainConfig};
use nlsal_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn zero_output_projection_is_the_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (h, w, c) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=9));
        let ce = rng.gen_range(1..=c);
        let x = Tensor::uniform([1, h, w, c], -3.0, 3.0, &mut rng);
        let mut p = NonLocalParams::init(c, ce, Default::default(), &mut rng);
        p.w_z = Tensor::zeros(p.w_z.shape());
        assert_eq!(nl_block(&x, &p).unwrap().data(), x.data());
    }
}

#[test]
fn inserting_silent_blocks_leaves_a_trained_net_unchanged() {
    let set = synth_dataset(&SynthSpec {
        sequences: 1,
        frames_per_sequence: 3,
        size: 32,
        ..Default::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut plain = Network::build(NetworkSpec::static_default().with_nl(4, 0), &mut rng).unwrap();
    let cfg = TrainConfig {
        iterations: 20,
        ..Default::default()
    };
    train_stage(&mut plain, &static_samples(&set), &cfg, |_, _, _| Ok(true)).unwrap();

    let mut extended = Network::build(NetworkSpec::static_default().with_nl(4, 3), &mut rng).unwrap();
    for (name, t) in plain.params().iter() {
        *extended.params_mut().get_mut(name).unwrap() = t.clone();
    }
    extended.zero_nl_output_projections();
    // the other embeddings stay random, only W_z is silenced
    assert!(extended.params().get(&nl_name(1, "theta")).unwrap().data().iter().any(|&v| v != 0.0));

    for s in set.samples() {
        let a = static_forward(&plain, s.frame_t).unwrap();
        let b = static_forward(&extended, s.frame_t).unwrap();
        assert_eq!(a.values(), b.values());
    }
}
