use std::sync::Arc;

use parking_lot::RwLock;

use super::ModelState;

/// An immutable, versioned view of the model.
#[derive(Debug)]
pub struct Snapshot {
    pub version: u64,
    pub state: ModelState,
}

pub type SnapshotHandle = Arc<Snapshot>;

/// Holds the most recently published snapshot. Readers clone the handle and
/// keep their view for as long as they hold it.
#[derive(Default)]
pub struct SnapshotCell {
    current: RwLock<Option<SnapshotHandle>>,
}

impl SnapshotCell {
    pub fn publish(&self, state: ModelState) -> SnapshotHandle {
        let mut slot = self.current.write();
        let version = slot.as_ref().map_or(1, |s| s.version + 1);
        let handle = Arc::new(Snapshot { version, state });
        *slot = Some(handle.clone());
        handle
    }

    pub fn current(&self) -> Option<SnapshotHandle> {
        self.current.read().clone()
    }

    pub fn version(&self) -> u64 {
        self.current.read().as_ref().map_or(0, |s| s.version)
    }
}
