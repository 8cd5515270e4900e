//! Guides: 64-bit object references carrying access-tracking metadata.
//!
//! A guide word packs a 48-bit machine address together with the bits the
//! runtime needs to observe and relocate the object it points at:
//!
//! ```text
//!  63      57 56  55  54     49  48  47                                  0
//! +----------+---+---+---------+---+-------------------------------------+
//! | reserved |mig|trk|   atc   |acc|               address               |
//! +----------+---+---+---------+---+-------------------------------------+
//! ```
//!
//! * `acc`: set by accessors on dereference, cleared only by the collector scan.
//! * `atc`: active thread count, the number of threads currently inside an
//!   instrumented scope entered through this guide (0..=63).
//! * `trk`: the slot holds a managed object.
//! * `mig`: a collector is copying the object; accessors must wait.
//!
//! Every transition on a [`GuideSlot`] is a single compare-and-swap or a
//! single store on one word. The pure transition functions on [`GuideWord`]
//! are shared with the small-model interleaving checker in the test suite.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_utils::Backoff;

/// Number of low bits holding the machine address.
pub const ADDRESS_BITS: u32 = 48;
/// Largest representable active thread count.
pub const MAX_ATC: u8 = 63;

const ADDRESS_MASK: u64 = (1 << ADDRESS_BITS) - 1;
const ACCESS_SHIFT: u32 = 48;
const ATC_SHIFT: u32 = 49;
const ATC_MASK: u64 = 0x3f << ATC_SHIFT;
const TRACKING_SHIFT: u32 = 55;
const MIGRATING_SHIFT: u32 = 56;
const RESERVED_MASK: u64 = !((1u64 << 57) - 1);

const ACCESS_BIT: u64 = 1 << ACCESS_SHIFT;
const ATC_ONE: u64 = 1 << ATC_SHIFT;
const TRACKING_BIT: u64 = 1 << TRACKING_SHIFT;
const MIGRATING_BIT: u64 = 1 << MIGRATING_SHIFT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum GuideError {
    #[error("address {0:#x} does not fit in 48 bits")]
    AddressOverflow(u64),
    #[error("field value {0} out of range")]
    FieldOverflow(u64),
    #[error("reserved bits set in raw guide word {0:#x}")]
    ReservedBits(u64),
    #[error("active thread count saturated at 63")]
    AtcSaturated,
    #[error("active thread count underflow (unbalanced scope exit)")]
    AtcUnderflow,
    #[error("migration protocol violation: migrating flag not set")]
    NotMigrating,
}

/// The unpacked fields of a [`GuideWord`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GuideFields {
    pub address: u64,
    pub access_bit: bool,
    pub atc: u8,
    pub tracking_flag: bool,
    pub migrating_flag: bool,
}

/// A packed guide word. Plain value; see [`GuideSlot`] for the shared cell.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct GuideWord(u64);

/// Result of a single `atc_enter` attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnterOutcome {
    /// ATC was incremented; the word observed after the increment.
    Entered(GuideWord),
    /// The collector is moving the object; nothing was written.
    BlockedMigrating,
    /// Tracking is off (globally or for this slot); nothing was written.
    TrackingInactive(GuideWord),
}

impl GuideWord {
    pub const NULL: GuideWord = GuideWord(0);

    pub fn pack(
        address: u64,
        access_bit: bool,
        atc: u8,
        tracking_flag: bool,
        migrating_flag: bool,
    ) -> Result<Self, GuideError> {
        if address > ADDRESS_MASK {
            return Err(GuideError::AddressOverflow(address));
        }
        if atc > MAX_ATC {
            return Err(GuideError::FieldOverflow(atc as u64));
        }
        Ok(GuideWord(
            address
                | (access_bit as u64) << ACCESS_SHIFT
                | (atc as u64) << ATC_SHIFT
                | (tracking_flag as u64) << TRACKING_SHIFT
                | (migrating_flag as u64) << MIGRATING_SHIFT,
        ))
    }

    /// A freshly published managed guide: tracking on, everything else clear.
    pub fn managed(address: u64) -> Result<Self, GuideError> {
        Self::pack(address, false, 0, true, false)
    }

    pub fn from_raw(raw: u64) -> Result<Self, GuideError> {
        if raw & RESERVED_MASK != 0 {
            return Err(GuideError::ReservedBits(raw));
        }
        Ok(GuideWord(raw))
    }

    #[inline]
    pub const fn raw(self) -> u64 {
        self.0
    }

    pub fn unpack(self) -> GuideFields {
        GuideFields {
            address: self.address(),
            access_bit: self.access_bit(),
            atc: self.atc(),
            tracking_flag: self.tracking_flag(),
            migrating_flag: self.migrating_flag(),
        }
    }

    #[inline]
    pub const fn address(self) -> u64 {
        self.0 & ADDRESS_MASK
    }

    #[inline]
    pub const fn access_bit(self) -> bool {
        self.0 & ACCESS_BIT != 0
    }

    #[inline]
    pub const fn atc(self) -> u8 {
        ((self.0 & ATC_MASK) >> ATC_SHIFT) as u8
    }

    #[inline]
    pub const fn tracking_flag(self) -> bool {
        self.0 & TRACKING_BIT != 0
    }

    #[inline]
    pub const fn migrating_flag(self) -> bool {
        self.0 & MIGRATING_BIT != 0
    }

    #[inline]
    pub const fn with_access(self) -> Self {
        GuideWord(self.0 | ACCESS_BIT)
    }

    #[inline]
    pub const fn without_access(self) -> Self {
        GuideWord(self.0 & !ACCESS_BIT)
    }

    #[inline]
    pub const fn without_tracking(self) -> Self {
        GuideWord(self.0 & !TRACKING_BIT)
    }

    /// Transition for one scope entry, given whether tracking is globally on.
    pub fn enter_transition(self, tracking_active: bool) -> Result<EnterOutcome, GuideError> {
        if !tracking_active || !self.tracking_flag() {
            return Ok(EnterOutcome::TrackingInactive(self));
        }
        if self.migrating_flag() {
            return Ok(EnterOutcome::BlockedMigrating);
        }
        if self.atc() == MAX_ATC {
            return Err(GuideError::AtcSaturated);
        }
        Ok(EnterOutcome::Entered(GuideWord(self.0 + ATC_ONE)))
    }

    pub fn exit_transition(self) -> Result<Self, GuideError> {
        if self.atc() == 0 {
            return Err(GuideError::AtcUnderflow);
        }
        Ok(GuideWord(self.0 - ATC_ONE))
    }

    /// `Some(next)` only when the object is idle: managed, atc = 0, not migrating.
    pub fn begin_migration_transition(self) -> Option<Self> {
        if self.tracking_flag() && self.atc() == 0 && !self.migrating_flag() {
            Some(GuideWord(self.0 | MIGRATING_BIT))
        } else {
            None
        }
    }

    pub fn commit_transition(self, new_address: u64) -> Result<Self, GuideError> {
        if !self.migrating_flag() {
            return Err(GuideError::NotMigrating);
        }
        if new_address > ADDRESS_MASK {
            return Err(GuideError::AddressOverflow(new_address));
        }
        // atc is zero while migrating; keep access and tracking bits.
        let keep = self.0 & (ACCESS_BIT | TRACKING_BIT);
        Ok(GuideWord(new_address | keep))
    }

    pub fn abort_transition(self) -> Result<Self, GuideError> {
        if !self.migrating_flag() {
            return Err(GuideError::NotMigrating);
        }
        Ok(GuideWord(self.0 & !MIGRATING_BIT))
    }
}

impl fmt::Debug for GuideWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GuideWord")
            .field("address", &format_args!("{:#x}", self.address()))
            .field("access", &self.access_bit())
            .field("atc", &self.atc())
            .field("tracking", &self.tracking_flag())
            .field("migrating", &self.migrating_flag())
            .finish()
    }
}

/// The shared cell holding a guide word. Lives either in a boxed root slot or
/// embedded (8-byte aligned) inside another managed object.
#[repr(transparent)]
#[derive(Default)]
pub struct GuideSlot(AtomicU64);

impl GuideSlot {
    pub const fn new(word: GuideWord) -> Self {
        GuideSlot(AtomicU64::new(word.0))
    }

    /// Reinterprets an 8-byte aligned location as a guide slot.
    ///
    /// # Safety
    /// `addr` must be 8-byte aligned, valid for reads and writes for `'a`, and
    /// only ever accessed atomically while the reference is live.
    pub unsafe fn from_addr<'a>(addr: u64) -> &'a GuideSlot {
        debug_assert_eq!(addr % 8, 0);
        &*(addr as *const GuideSlot)
    }

    #[inline]
    pub fn load(&self) -> GuideWord {
        GuideWord(self.0.load(Ordering::Acquire))
    }

    /// Raw store used when publishing a slot that no other thread can see yet.
    pub fn store(&self, word: GuideWord) {
        self.0.store(word.0, Ordering::Release);
    }

    /// Sets the access bit. Returns `true` if a store was issued; an already
    /// set bit costs a single load.
    #[inline]
    pub fn mark_access(&self) -> bool {
        if self.0.load(Ordering::Relaxed) & ACCESS_BIT != 0 {
            return false;
        }
        self.0.fetch_or(ACCESS_BIT, Ordering::AcqRel);
        true
    }

    /// Reads and clears the access bit (collector scan).
    pub fn clear_access(&self) -> bool {
        if self.0.load(Ordering::Relaxed) & ACCESS_BIT == 0 {
            return false;
        }
        self.0.fetch_and(!ACCESS_BIT, Ordering::AcqRel) & ACCESS_BIT != 0
    }

    /// One entry attempt; never spins.
    pub fn try_atc_enter(&self, tracking_active: bool) -> Result<EnterOutcome, GuideError> {
        let mut current = self.load();
        loop {
            match current.enter_transition(tracking_active)? {
                EnterOutcome::Entered(next) => {
                    match self.0.compare_exchange_weak(
                        current.0,
                        next.0,
                        Ordering::AcqRel,
                        Ordering::Acquire,
                    ) {
                        Ok(_) => return Ok(EnterOutcome::Entered(next)),
                        Err(seen) => current = GuideWord(seen),
                    }
                }
                other => return Ok(other),
            }
        }
    }

    /// Enters a scope, waiting out any in-progress migration.
    ///
    /// Never returns `BlockedMigrating`. Saturation is reported to the caller,
    /// which decides whether to retry.
    pub fn atc_enter(&self, tracking_active: bool) -> Result<EnterOutcome, GuideError> {
        let backoff = Backoff::new();
        loop {
            match self.try_atc_enter(tracking_active)? {
                EnterOutcome::BlockedMigrating => backoff.snooze(),
                done => return Ok(done),
            }
        }
    }

    pub fn atc_exit(&self) -> Result<(), GuideError> {
        let mut current = self.load();
        loop {
            let next = current.exit_transition()?;
            match self.0.compare_exchange_weak(
                current.0,
                next.0,
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return Ok(()),
                Err(seen) => current = GuideWord(seen),
            }
        }
    }

    /// Sets the migrating flag iff the object is idle.
    pub fn try_begin_migration(&self) -> bool {
        self.begin_migration_if(|_| true)
    }

    /// As [`try_begin_migration`](Self::try_begin_migration), additionally
    /// requiring the slot to still reference `expected_address`.
    pub fn try_begin_migration_at(&self, expected_address: u64) -> bool {
        self.begin_migration_if(|w| w.address() == expected_address)
    }

    fn begin_migration_if(&self, accept: impl Fn(GuideWord) -> bool) -> bool {
        let mut current = self.load();
        loop {
            if !accept(current) {
                return false;
            }
            let Some(next) = current.begin_migration_transition() else {
                return false;
            };
            // Only the access bit can change under us without making the
            // object busy, so this loop is short.
            match self
                .0
                .compare_exchange(current.0, next.0, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return true,
                Err(seen) => current = GuideWord(seen),
            }
        }
    }

    pub fn commit_migration(&self, new_address: u64) -> Result<(), GuideError> {
        let mut current = self.load();
        loop {
            let next = current.commit_transition(new_address)?;
            match self
                .0
                .compare_exchange(current.0, next.0, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return Ok(()),
                Err(seen) => current = GuideWord(seen),
            }
        }
    }

    pub fn abort_migration(&self) -> Result<(), GuideError> {
        let mut current = self.load();
        loop {
            let next = current.abort_transition()?;
            match self
                .0
                .compare_exchange(current.0, next.0, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return Ok(()),
                Err(seen) => current = GuideWord(seen),
            }
        }
    }

    /// Points the slot at a different object, waiting until the current one
    /// is neither being moved nor inside any counted scope. Returns the word
    /// that was replaced.
    pub fn replace(&self, new: GuideWord) -> GuideWord {
        let backoff = Backoff::new();
        let mut current = self.load();
        loop {
            if current.migrating_flag() || current.atc() != 0 {
                backoff.snooze();
                current = self.load();
                continue;
            }
            match self
                .0
                .compare_exchange(current.0, new.0, Ordering::AcqRel, Ordering::Acquire)
            {
                Ok(_) => return current,
                Err(seen) => current = GuideWord(seen),
            }
        }
    }
}

impl fmt::Debug for GuideSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.load().fmt(f)
    }
}
