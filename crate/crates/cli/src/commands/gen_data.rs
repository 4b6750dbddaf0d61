use pnp_core::geometry::CameraModel;
use pnp_core::scene::{demonstrations, save_dataset};

use crate::args::GenDataArgs;
use crate::error::{usage, Result};
use crate::run_config::RunConfig;

/// Writes the dataset and returns its sample count.
pub fn gen_data(a: &GenDataArgs) -> Result<usize> {
    let camera = CameraModel::square(a.camera.workspace, a.camera.pixels);
    let mut rc = RunConfig::new("gen-data", &a.out, a.seed);
    rc.task = Some(a.task.to_string());
    rc.demos = Some(a.demos);
    rc.camera = Some(camera);
    rc.validate()?;
    if a.out.join("manifest.json").exists() {
        return Err(usage!("{} already holds a dataset", a.out.display()));
    }
    let mut samples = Vec::new();
    for i in 0..a.demos {
        samples.extend(demonstrations(&a.task, a.seed.wrapping_add(i), &camera)?);
    }
    save_dataset(&a.out, &a.task, &camera, &samples)?;
    rc.save(&a.out)?;
    Ok(samples.len())
}
