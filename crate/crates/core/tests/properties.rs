use proptest::prelude::*;

use diffmae::model::{DecoderVariant, DiffMae, Head, ModelConfig};
use diffmae::numerics::{RngStream, Tape, Tensor};
use diffmae::patching::{random_mask, PatchGrid};
use diffmae::sampling::{inpaint, SamplerConfig};
use diffmae::schedule::{Schedule, ScheduleConfig};
use diffmae::training::{Checkpoint, Target, TrainConfig, Trainer};

fn small(variant: DecoderVariant) -> ModelConfig {
    ModelConfig { image_h: 12, image_w: 12, ..ModelConfig::gradcheck(variant) }
}

fn variant() -> impl Strategy<Value = DecoderVariant> {
    prop::sample::select(DecoderVariant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn sampler_only_writes_masked_rows(seed in any::<u64>(), ratio in 0.2f64..0.8, v in variant(), steps in 1usize..12) {
        let model = DiffMae::<f64>::init(small(v), &mut RngStream::new(seed)).unwrap();
        let grid = model.grid();
        let mut rng = RngStream::new(seed ^ 1);
        let image = rng.randn::<f64>(&grid.image_shape()).map(|x| x.tanh());
        let part = random_mask(&mut rng, grid.num_patches(), ratio).unwrap();
        let schedule = Schedule::from_config(&ScheduleConfig::default()).unwrap();
        let ts = schedule.sampling_timesteps(steps).unwrap();
        let cfg = SamplerConfig { steps: Some(steps), snapshot_ts: vec![ts[0], 0], seed, ..SamplerConfig::default() };
        let out = inpaint(&model, &grid, &image, &part, &schedule, &cfg, Target::Pixel).unwrap();
        let truth = grid.patchify(&image).unwrap().gather_rows(&part.visible).unwrap();
        for (_, img) in out.snapshots.iter().chain([(0, out.image.clone())].iter()) {
            let got = grid.patchify(img).unwrap().gather_rows(&part.visible).unwrap();
            prop_assert_eq!(got.data(), truth.data());
        }
    }

    #[test]
    fn decoder_is_permutation_equivariant(seed in any::<u64>(), v in variant(), t in 1usize..=1000) {
        let model = DiffMae::<f64>::init(small(v), &mut RngStream::new(seed)).unwrap();
        let grid = model.grid();
        let mut rng = RngStream::new(seed ^ 2);
        let part = random_mask(&mut rng, grid.num_patches(), 0.5).unwrap();
        let visible = rng.randn::<f64>(&[part.visible.len(), grid.patch_dim()]);
        let noisy = rng.randn::<f64>(&[part.masked.len(), grid.patch_dim()]);
        let trace = model.encode(&visible, &part.visible, 1).unwrap();
        let out = model.decode(Head::Pixel, &noisy, &part.masked, &[t], &trace).unwrap();
        let mut perm: Vec<usize> = (0..part.masked.len()).collect();
        rng.shuffle(&mut perm);
        let pos: Vec<usize> = perm.iter().map(|&i| part.masked[i]).collect();
        let out_p = model.decode(Head::Pixel, &noisy.gather_rows(&perm).unwrap(), &pos, &[t], &trace).unwrap();
        prop_assert!(out_p.max_abs_diff(&out.gather_rows(&perm).unwrap()) < 1e-12);
    }

    #[test]
    fn pooled_features_see_every_patch(seed in any::<u64>(), patch in 0usize..9) {
        let model = DiffMae::<f64>::init(small(DecoderVariant::Cross), &mut RngStream::new(seed)).unwrap();
        let grid = model.grid();
        let image = RngStream::new(seed ^ 3).randn::<f64>(&grid.image_shape());
        let features = |img: &Tensor<f64>| {
            let mut g = Tape::new();
            let p = model.params().bind(&mut g, false);
            let x = g.constant(grid.patchify(img).unwrap());
            let f = model.pooled_features_on(&mut g, &p, x, 1).unwrap();
            g.value(f).clone()
        };
        let mut bumped = image.clone();
        let ones = Tensor::full(&[1, grid.patch_dim()], 0.7);
        grid.write_patches(&mut bumped, &ones, &[patch]).unwrap();
        prop_assert!(features(&bumped).max_abs_diff(&features(&image)) > 0.0);
    }

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), steps in 0usize..3, v in variant()) {
        let model = DiffMae::<f64>::init(small(v), &mut RngStream::new(seed)).unwrap();
        let cfg = TrainConfig { steps: 3, batch_size: 2, seed, ..TrainConfig::default() };
        let data: Vec<Tensor<f64>> = (0..3).map(|i| RngStream::new(seed ^ i).randn::<f64>(&PatchGrid::new(12, 12, 1, 4).unwrap().image_shape()).map(|x| x.tanh())).collect();
        let mut tr = Trainer::new(model, cfg).unwrap();
        tr.run(&data, steps, |_, _| Ok(())).unwrap();
        let bytes = tr.checkpoint().to_bytes().unwrap();
        let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(back.step as usize, steps);
    }
}
