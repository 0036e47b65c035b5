use anyhow::Result;
use splat4d::synthdata::{degrade_priors, generate_scene};
use std::path::Path;

use crate::config::load_config;
use crate::dataset::save_dataset;

pub fn run(config: Option<&Path>, out: &Path) -> Result<()> {
    let config = load_config(config)?;
    let mut ds = generate_scene(&config.scene)?;
    if let Some(noise) = &config.degrade {
        log::info!("degrading priors: {noise:?}");
        ds.priors = degrade_priors(&ds.priors, noise, config.scene.seed ^ 0x5eed);
    }
    save_dataset(out, &ds)?;
    log::info!(
        "wrote {} frames, {} flow pairs, {} tracks, {} test frames to {}",
        ds.frames.len(),
        ds.priors.flows.len(),
        ds.priors.tracks.len(),
        ds.test_frames.len(),
        out.display()
    );
    Ok(())
}
