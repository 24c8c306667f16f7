//! Generates a phantom case, partitions it into regions and scores fields.

use quasinormal::registration::DeformationField;
use quasinormal::synth::{deformation_error, region_partition, synth_case, PhantomSpec, Region};

fn main() -> quasinormal::Result<()> {
    let spec = PhantomSpec::square(48);
    let case = synth_case(9, &spec)?;
    let tumor_voxels = case.tumor_mask.data().iter().filter(|&&v| v > 0.5).count();
    println!("case seed {}: {tumor_voxels} tumor voxels", case.seed);

    for near in [5.0, 10.0, 15.0] {
        let regions = region_partition(&case.tumor_mask, near)?;
        println!(
            "near_mm {near:>4}: tumor {} near {} far {}",
            regions.count(Region::Tumor),
            regions.count(Region::Near),
            regions.count(Region::Far)
        );
    }

    let regions = region_partition(&case.tumor_mask, 10.0)?;
    let zero = DeformationField::zeros(case.gt_field.geometry().clone());
    let e = deformation_error(&zero, &case.gt_field, &regions)?;
    println!(
        "identity field vs ground truth: tumor {:.3} near {:.3} far {:.3} weighted {:.3} mm",
        e.mean_error_mm[0].unwrap_or(f64::NAN),
        e.mean_error_mm[1].unwrap_or(f64::NAN),
        e.mean_error_mm[2].unwrap_or(f64::NAN),
        e.weighted
    );
    Ok(())
}
