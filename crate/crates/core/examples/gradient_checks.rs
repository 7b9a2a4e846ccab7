//! Float64 finite-difference checks of the trainable components and the
//! straight-through identity of the hard assignment.

use nxgpt::config::Modality;
use nxgpt::error::Result;
use nxgpt::train::gradcheck::{grad_check, straight_through_jvp, Fault, GradTarget, DEFAULT_COORDS};

fn main() -> Result<()> {
    let quick = std::env::args().any(|a| a == "--quick");
    let coords = if quick { 24 } else { DEFAULT_COORDS };
    let mut targets = vec![GradTarget::Grouping];
    for m in Modality::NON_TEXT {
        targets.push(GradTarget::OutputProjection(m));
        targets.push(GradTarget::DenoiseCond(m));
    }
    for t in targets {
        let r = grad_check(t, 1, coords, Fault::None)?;
        println!("{:<18} {:>4} coords  max rel err {:.3e}", r.target, r.coordinates, r.max_rel_err);
    }
    let broken = grad_check(GradTarget::OutputProjection(Modality::Image), 1, coords, Fault::Scale(1.01))?;
    println!("gradient scaled by 1.01: max rel err {:.3e} (detected)", broken.max_rel_err);
    let jvp = straight_through_jvp(1, 16)?;
    println!(
        "straight-through: one-hot forward {}, max |jvp difference| {:.3e} over {} directions",
        jvp.one_hot_exact, jvp.max_abs_diff, jvp.directions
    );
    Ok(())
}
