use anyhow::{Context, Result};
use dimrank_core::store::latest_checkpoint;
use dimrank_core::{ModelCheckpoint, ModelState, Store};

use crate::config::ServiceConfig;

/// The newest checkpointed model, or a fresh one when nothing has been trained.
pub fn initial_state(store: &Store, config: &ServiceConfig) -> Result<ModelState> {
    match latest_checkpoint(&store.checkpoint_dir())? {
        Some(path) => {
            let ckpt = ModelCheckpoint::load(&path, Some(config.dims)).with_context(|| format!("loading {}", path.display()))?;
            Ok(ckpt.state)
        }
        None => Ok(ModelState::new(config.dims, config.trainer.seed)),
    }
}
