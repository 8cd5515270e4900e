//! Tracking epochs and single-object moves.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::epoch::{EpochCounter, Participants};
use crate::heap::{HeapError, HeapId, HeapManager};
use crate::registry::{ObjectId, Registry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpochState {
    Idle,
    Tracking,
    Draining,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationEpoch {
    pub epoch_id: u64,
    pub state: EpochState,
    pub opened_at: Option<Instant>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MoveOutcome {
    Moved(u64),
    Busy,
    Oom,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch_id: u64,
    pub moved_count: u64,
    pub busy_count: u64,
    pub oom_count: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MigrationError {
    #[error("a migration epoch is already open")]
    EpochAlreadyOpen,
    #[error("no migration epoch is open")]
    NoEpochOpen,
    #[error("object {0} is not registered")]
    UnknownObject(ObjectId),
    #[error(transparent)]
    Heap(#[from] HeapError),
}

/// Collector-side epoch state machine. Not shared between threads.
#[derive(Debug)]
pub struct MigrationEngine {
    epoch: MigrationEpoch,
    summary: EpochSummary,
}

impl Default for MigrationEngine {
    fn default() -> Self {
        Self::new()
    }
}

impl MigrationEngine {
    pub fn new() -> Self {
        MigrationEngine {
            epoch: MigrationEpoch {
                epoch_id: 0,
                state: EpochState::Idle,
                opened_at: None,
            },
            summary: EpochSummary::default(),
        }
    }

    pub fn epoch(&self) -> MigrationEpoch {
        self.epoch
    }

    /// Turns tracking on and waits until every scope that might have started
    /// before tracking was visible has ended.
    pub fn open_epoch(
        &mut self,
        counter: &EpochCounter,
        participants: &Participants,
    ) -> Result<u64, MigrationError> {
        if self.epoch.state != EpochState::Idle {
            return Err(MigrationError::EpochAlreadyOpen);
        }
        let snap = counter.advance(true);
        participants.wait_quiescent(snap.value);
        self.epoch = MigrationEpoch {
            epoch_id: self.epoch.epoch_id + 1,
            state: EpochState::Tracking,
            opened_at: Some(Instant::now()),
        };
        self.summary = EpochSummary {
            epoch_id: self.epoch.epoch_id,
            ..EpochSummary::default()
        };
        Ok(self.epoch.epoch_id)
    }

    /// Moves one object to `dst_heap` if no thread is inside its scope.
    pub fn move_object(
        &mut self,
        heaps: &HeapManager,
        registry: &Registry,
        id: ObjectId,
        dst_heap: HeapId,
    ) -> Result<MoveOutcome, MigrationError> {
        if self.epoch.state != EpochState::Tracking {
            return Err(MigrationError::NoEpochOpen);
        }
        let loc = registry
            .locate(id)
            .ok_or(MigrationError::UnknownObject(id))?;
        if loc.heap == dst_heap {
            return Ok(MoveOutcome::Moved(loc.address));
        }
        let slot = loc.slot.slot();
        if !slot.try_begin_migration_at(loc.address) {
            self.summary.busy_count += 1;
            return Ok(MoveOutcome::Busy);
        }
        match heaps.relocate(loc.address, loc.size, loc.heap, dst_heap) {
            Ok(new_address) => {
                registry.update_location(id, new_address, dst_heap);
                slot.commit_migration(new_address)
                    .expect("migrating flag set by this collector");
                self.summary.moved_count += 1;
                Ok(MoveOutcome::Moved(new_address))
            }
            Err(e) => {
                slot.abort_migration()
                    .expect("migrating flag set by this collector");
                match e {
                    HeapError::OutOfMemory(_) => {
                        self.summary.oom_count += 1;
                        Ok(MoveOutcome::Oom)
                    }
                    other => Err(other.into()),
                }
            }
        }
    }

    /// Turns tracking off and waits for every counted scope to exit.
    pub fn close_epoch(
        &mut self,
        counter: &EpochCounter,
        participants: &Participants,
    ) -> Result<EpochSummary, MigrationError> {
        if self.epoch.state != EpochState::Tracking {
            return Err(MigrationError::NoEpochOpen);
        }
        self.epoch.state = EpochState::Draining;
        let snap = counter.advance(false);
        participants.wait_quiescent(snap.value);
        self.epoch.state = EpochState::Idle;
        self.epoch.opened_at = None;
        Ok(self.summary)
    }
}
