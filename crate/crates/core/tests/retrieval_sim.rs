mod common;

use common::frames;
use surfloc::descriptor::{FrameFeatures, GlobalBackend};
use surfloc::pipeline::{train_from_frames, DEFAULT_VOCABULARY_SIZE};
use surfloc::simulator::{simulate, Preset};

#[test]
fn same_place_frames_are_more_similar() {
    for seed in 0..100 {
        let mut exp = Preset::Room.experiment(seed);
        exp.scene.surfel_radius = 0.1;
        exp.noise.descriptor_flips = 8;
        let run = simulate(&exp).unwrap();
        let vocab = train_from_frames(&frames(&run), DEFAULT_VOCABULARY_SIZE, seed).unwrap();
        let globals: Vec<_> = run
            .database
            .iter()
            .chain(&run.query)
            .map(|f| (f.place, FrameFeatures::describe(f.features.clone(), &vocab, GlobalBackend::Vlad).unwrap().global))
            .collect();
        let (mut same, mut other) = ((0.0, 0), (0.0, 0));
        for (i, (pa, ga)) in globals.iter().enumerate() {
            for (pb, gb) in &globals[i + 1..] {
                let s = ga.similarity(gb);
                let acc = if pa == pb { &mut same } else { &mut other };
                acc.0 += s;
                acc.1 += 1;
            }
        }
        let (same, other) = (same.0 / same.1 as f64, other.0 / other.1 as f64);
        assert!(same > other, "seed {seed}: same {same} other {other}");
    }
}
