//! The default 8×8 grid of 32×32 frames at full model width.

use gridflow::config::RunConfig;
use gridflow::dit::{perturb_params, VideoModel};
use gridflow::grid::{validate_grid, FrameGrid, GridMask};
use gridflow::rng::rng_for;
use gridflow::sync::{four_d_forward, SyncStack, SyncVariant};
use rand::Rng;

#[test]
fn default_config_grid_forward_is_finite() {
    let cfg = RunConfig::default();
    let mc = cfg.model_config();
    assert_eq!((cfg.model.v, cfg.model.t, mc.frame.h, mc.frame.w), (8, 8, 32, 32));
    let mut base = VideoModel::<f32>::new(mc, &mut rng_for(0, "init", 0)).unwrap();
    perturb_params(&mut base, &mut rng_for(0, "perturb", 0), 0.02);
    let mut syncs = SyncStack::new(SyncVariant::Soft, &base, false);
    perturb_params(&mut syncs, &mut rng_for(0, "perturb", 1), 0.02);
    let mut rng = rng_for(0, "grid", 0);
    let given = FrameGrid::from_fn(8, 8, mc.frame, |_, _, _, _, _| rng.gen_range(0.0f32..1.0));
    validate_grid(&given).unwrap();
    let noisy = given.map(|x| 2.0 * x - 1.0);
    let out = four_d_forward(&base, &syncs, &noisy, &given, &GridMask::first_row_and_column(8, 8), 0.7).unwrap();
    assert_eq!((out.velocity.v, out.velocity.t), (8, 8));
    assert!(out.velocity.data.iter().all(|x| x.is_finite()));
}
