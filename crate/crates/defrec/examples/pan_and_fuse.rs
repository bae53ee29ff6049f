//! Field-of-view changes: the scene slides sideways until part of the
//! surface leaves the image, then slides back. Out-of-view geometry is
//! carried rigidly with its visible neighbors and re-fused on return;
//! newly exposed surface joins the canonical model the frame it appears.
//!
//! Run with:
//!
//! ```text
//! cargo run --release --example pan_and_fuse
//! ```

use defrec::measure::mask_out_instrument;
use defrec::recover::{init_state, step, StepConfig};
use defrec::simcam::{eval_rmse_msd, generate, scenario};

fn main() {
    let cfg = scenario("camera_pan", None, 2).expect("known scenario");
    let frames = generate(&cfg).expect("generate");
    println!(
        "pan: {} frames, scene slides +2 mm/frame in x then returns; image stays {}x{}",
        cfg.frames, cfg.width, cfg.height
    );

    let k = cfg.intrinsics;
    let step_config = StepConfig::default();
    let mut masked = mask_out_instrument(&frames[0].bundle);
    let mut state = init_state(&masked).expect("init");
    let seeded = state.params().len();

    for t in 0..frames.len() - 1 {
        let next = mask_out_instrument(&frames[t + 1].bundle);
        let out = step(&state, &masked, &next, &k, &step_config).expect("step");
        state = out.state;
        masked = next;

        // The canonical domain grows as reprojected points pass the image
        // border; out_of_fov counts model points currently invisible.
        let d = state.domain();
        println!(
            "frame {:2}: grid {}x{} at offset {:?}, {:5} pts ({:4} out of view, {:4} newly fused)",
            t + 1,
            d.width,
            d.height,
            d.offset,
            state.params().len(),
            out.partition.out_of_fov.len(),
            state.params().len() as i64 - out.partition.all().len() as i64
        );
    }

    // After the full out-and-back pan the model should cover more surface
    // than one image ever saw, and still match the truth where truth is
    // known (the final image footprint).
    let truth = &frames[frames.len() - 1].truth_points;
    let (rmse, msd, std) = eval_rmse_msd(state.points(), truth, truth.defined()).expect("eval");
    println!(
        "final: {} pts (seeded {}), rmse {:.4} mm, msd {:.4} +/- {:.4} mm on the visible footprint",
        state.params().len(),
        seeded,
        rmse,
        msd,
        std
    );
    assert!(state.params().len() > seeded, "panning should widen the canonical model");
    assert!(msd < 0.5, "returned geometry drifted: msd {msd}");
}
