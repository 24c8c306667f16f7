//! Registers the atlas to a tumor phantom, plain and with the tumor masked.

use quasinormal::registration::{register, warp, RegParams, Similarity};
use quasinormal::synth::{
    atlas_phantom, deformation_error, region_partition, synth_case, PhantomSpec, NEAR_MM,
};

fn main() -> quasinormal::Result<()> {
    let spec = PhantomSpec::square(48);
    let atlas = atlas_phantom(&spec)?;
    let case = synth_case(1, &spec)?;
    let regions = region_partition(&case.tumor_mask, NEAR_MM)?;
    let reference = register(&atlas, &case.normal, &RegParams::default())?;

    for (label, params) in [
        ("ncc", RegParams::default()),
        (
            "ssd",
            RegParams {
                similarity: Similarity::Ssd,
                ..Default::default()
            },
        ),
        (
            "ncc masked",
            RegParams {
                mask: Some(case.tumor_mask.clone()),
                ..Default::default()
            },
        ),
    ] {
        let field = register(&atlas, &case.tumor_image, &params)?;
        let warped = warp(&atlas, &field)?;
        let rms = warped.sub(&case.tumor_image)?.norm2() / (atlas.len() as f64).sqrt();
        let e = deformation_error(&field, &reference, &regions)?;
        println!(
            "{label:<10} image rms {rms:.4}  error tumor {:.3} near {:.3} far {:.3} weighted {:.3} mm",
            e.mean_error_mm[0].unwrap_or(f64::NAN),
            e.mean_error_mm[1].unwrap_or(f64::NAN),
            e.mean_error_mm[2].unwrap_or(f64::NAN),
            e.weighted
        );
    }
    Ok(())
}
