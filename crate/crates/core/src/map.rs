//! The Gaussian map: a growable primitive store with stable ids and
//! tombstoning.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Gaussian;

/// Stable identifier of a Gaussian. Ids are never reused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GaussianId(pub u64);

impl fmt::Display for GaussianId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

pub type IdSet = BTreeSet<GaussianId>;

/// First and second moments of the adaptive update, one entry per raw
/// parameter (mean 3, rot 4, log-scale 3, opacity 1, color 3).
#[derive(Clone, Debug, Default, PartialEq)]
pub(crate) struct Moments {
    pub m: [f64; crate::optim::PARAMS_PER_GAUSSIAN],
    pub v: [f64; crate::optim::PARAMS_PER_GAUSSIAN],
    pub steps: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Slot {
    pub id: GaussianId,
    pub gaussian: Gaussian,
    pub alive: bool,
    pub moments: Moments,
}

/// Collection of Gaussians addressed by [`GaussianId`].
///
/// Removal retires an id (tombstone) without moving storage, so a snapshot
/// can be restored cheaply; [`GaussianMap::compact`] drops tombstoned slots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianMap {
    slots: Vec<Slot>,
    index: HashMap<GaussianId, usize>,
    tombstones: IdSet,
    next_id: u64,
    generation: u64,
    live: usize,
}

impl GaussianMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_gaussians(gaussians: impl IntoIterator<Item = Gaussian>) -> Self {
        let mut map = Self::new();
        for g in gaussians {
            map.insert(g);
        }
        map
    }

    pub fn insert(&mut self, gaussian: Gaussian) -> GaussianId {
        let id = GaussianId(self.next_id);
        self.next_id += 1;
        self.insert_with_id(id, gaussian);
        id
    }

    fn insert_with_id(&mut self, id: GaussianId, gaussian: Gaussian) {
        self.index.insert(id, self.slots.len());
        self.slots.push(Slot {
            id,
            gaussian,
            alive: true,
            moments: Moments::default(),
        });
        self.live += 1;
        self.generation += 1;
    }

    /// Re-inserts a Gaussian under an explicit id (map-file loading).
    pub fn insert_raw(&mut self, id: GaussianId, gaussian: Gaussian) -> Result<()> {
        if self.index.contains_key(&id) || id.0 < self.next_id && self.tombstones.contains(&id) {
            return Err(Error::invalid(format!("duplicate gaussian id {id}")));
        }
        self.next_id = self.next_id.max(id.0 + 1);
        self.insert_with_id(id, gaussian);
        Ok(())
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub(crate) fn set_next_id(&mut self, next: u64) {
        self.next_id = self.next_id.max(next);
    }

    /// Retires `id`. Errors when the id is unknown or already removed.
    pub fn tombstone(&mut self, id: GaussianId) -> Result<()> {
        let slot = self
            .index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown gaussian id {id}")))?;
        let s = &mut self.slots[slot];
        if !s.alive {
            return Err(Error::invalid(format!("gaussian {id} already removed")));
        }
        s.alive = false;
        self.tombstones.insert(id);
        self.live -= 1;
        self.generation += 1;
        Ok(())
    }

    /// Physically drops tombstoned slots. Ids of live Gaussians are kept.
    pub fn compact(&mut self) {
        if self.slots.iter().all(|s| s.alive) {
            return;
        }
        self.slots.retain(|s| s.alive);
        self.index = self.slots.iter().enumerate().map(|(i, s)| (s.id, i)).collect();
        self.generation += 1;
    }

    pub fn is_live(&self, id: GaussianId) -> bool {
        self.index.get(&id).is_some_and(|&i| self.slots[i].alive)
    }

    pub fn get(&self, id: GaussianId) -> Option<&Gaussian> {
        self.index
            .get(&id)
            .map(|&i| &self.slots[i])
            .filter(|s| s.alive)
            .map(|s| &s.gaussian)
    }

    pub fn get_mut(&mut self, id: GaussianId) -> Option<&mut Gaussian> {
        match self.index.get(&id) {
            Some(&i) if self.slots[i].alive => {
                self.generation += 1;
                Some(&mut self.slots[i].gaussian)
            }
            _ => None,
        }
    }

    pub fn live_count(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    /// Ids retired since creation (including compacted ones).
    pub fn tombstones(&self) -> &IdSet {
        &self.tombstones
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Live Gaussians in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (GaussianId, &Gaussian)> {
        self.slots.iter().filter(|s| s.alive).map(|s| (s.id, &s.gaussian))
    }

    pub fn live_ids(&self) -> IdSet {
        self.iter().map(|(id, _)| id).collect()
    }

    pub(crate) fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub(crate) fn slots_mut(&mut self) -> &mut [Slot] {
        self.generation += 1;
        &mut self.slots
    }

    /// Rounds all parameters to single precision.
    pub fn round_to_f32(&mut self) {
        for s in self.slots_mut() {
            s.gaussian.round_to_f32();
        }
    }

    /// Same live ids and bitwise-identical parameters.
    pub fn same_content(&self, other: &GaussianMap) -> bool {
        self.iter().eq(other.iter())
    }
}
