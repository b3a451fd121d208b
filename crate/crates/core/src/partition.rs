//! Linkage structure over the observed records: the label vector, the induced
//! partition, and the incremental cluster bookkeeping used by every prior and
//! likelihood evaluation.
//!
//! Cluster labels are dense `usize` values in `0..n_records`; at most
//! `n_records` clusters can ever exist, so population-level labels are never
//! materialized. Freed labels are recycled, and a new cluster always takes the
//! smallest unused label so that runs are reproducible under a fixed seed.

use std::collections::BTreeSet;

use thiserror::Error;

/// Identifier of one observed record: database index and position within the
/// database, both zero-based. File formats print them one-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RecordId {
    pub db: usize,
    pub pos: usize,
}

impl RecordId {
    pub fn new(db: usize, pos: usize) -> Self {
        RecordId { db, pos }
    }
}

/// Cluster labels index into the state's member table.
pub type ClusterLabel = usize;

/// Structural restriction on the partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Constraint {
    /// Any partition of the records.
    Unconstrained,
    /// No two records of the same database may share a cluster.
    NoWithinDbDuplicates,
}

/// Destination of a record move.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveTarget {
    Existing(ClusterLabel),
    New,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PartitionError {
    #[error("unknown cluster label {0}")]
    UnknownLabel(ClusterLabel),
    #[error("record ({db}, {pos}) out of range")]
    UnknownRecord { db: usize, pos: usize },
    #[error("cluster {label} already holds a record from database {db}")]
    ConstraintViolation { label: ClusterLabel, db: usize },
    #[error("record ({db}, {pos}) is detached")]
    Detached { db: usize, pos: usize },
    #[error("another record is already detached")]
    AlreadyDetached,
    #[error("label vector inconsistent: {0}")]
    BadLabels(String),
}

/// Database sizes plus the flattened (db-major, record-minor) index map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DbLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    total: usize,
}

impl DbLayout {
    pub fn new(sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut total = 0;
        for &s in sizes {
            offsets.push(total);
            total += s;
        }
        DbLayout {
            sizes: sizes.to_vec(),
            offsets,
            total,
        }
    }

    pub fn n_databases(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_records(&self) -> usize {
        self.total
    }

    pub fn db_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn flat(&self, r: RecordId) -> Option<usize> {
        if r.db < self.sizes.len() && r.pos < self.sizes[r.db] {
            Some(self.offsets[r.db] + r.pos)
        } else {
            None
        }
    }

    pub fn record_id(&self, flat: usize) -> RecordId {
        debug_assert!(flat < self.total);
        let db = match self.offsets.binary_search(&flat) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        RecordId::new(db, flat - self.offsets[db])
    }

    pub fn db_of_flat(&self, flat: usize) -> usize {
        self.record_id(flat).db
    }

    /// All record ids in db-major, record-minor order.
    pub fn record_ids(&self) -> impl Iterator<Item = RecordId> + '_ {
        (0..self.sizes.len())
            .flat_map(move |db| (0..self.sizes[db]).map(move |pos| RecordId::new(db, pos)))
    }
}

/// Number of clusters, the cluster-size multiset, and (in the two-database
/// no-duplicates regime) the cross-database overlap count `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSummary {
    pub k: usize,
    pub cluster_sizes: Vec<usize>,
    pub t: Option<usize>,
}

/// Mutable partition state with incremental bookkeeping.
///
/// A single record may be temporarily detached (removed from its cluster)
/// while conditional weights are evaluated; all queries then describe the
/// state without that record.
#[derive(Debug, Clone)]
pub struct LinkageState {
    layout: DbLayout,
    constraint: Constraint,
    labels: Vec<Option<ClusterLabel>>,
    members: Vec<Vec<u32>>,
    active: BTreeSet<ClusterLabel>,
    free: BTreeSet<ClusterLabel>,
    k: usize,
    detached: Option<usize>,
}

impl LinkageState {
    /// Every record in its own cluster, labels `0..n`.
    pub fn all_singletons(db_sizes: &[usize], constraint: Constraint) -> Self {
        let layout = DbLayout::new(db_sizes);
        let n = layout.n_records();
        LinkageState {
            labels: (0..n).map(Some).collect(),
            members: (0..n).map(|i| vec![i as u32]).collect(),
            active: (0..n).collect(),
            free: BTreeSet::new(),
            k: n,
            detached: None,
            layout,
            constraint,
        }
    }

    /// Rebuild a state from a flat label vector (db-major order). Labels may
    /// be arbitrary and are compacted into `0..n`.
    pub fn from_labels(
        db_sizes: &[usize],
        labels: &[usize],
        constraint: Constraint,
    ) -> Result<Self, PartitionError> {
        let layout = DbLayout::new(db_sizes);
        let n = layout.n_records();
        if labels.len() != n {
            return Err(PartitionError::BadLabels(format!(
                "expected {} labels, got {}",
                n,
                labels.len()
            )));
        }
        let mut remap: std::collections::HashMap<usize, ClusterLabel> =
            std::collections::HashMap::new();
        let mut state = LinkageState {
            labels: vec![None; n],
            members: (0..n).map(|_| Vec::new()).collect(),
            active: BTreeSet::new(),
            free: (0..n).collect(),
            k: 0,
            detached: None,
            layout,
            constraint,
        };
        for (flat, &raw) in labels.iter().enumerate() {
            let next = state.free.iter().next().copied();
            let label = *remap.entry(raw).or_insert_with(|| next.unwrap());
            state.free.remove(&label);
            state.active.insert(label);
            if constraint == Constraint::NoWithinDbDuplicates {
                let db = state.layout.db_of_flat(flat);
                if state.members[label]
                    .iter()
                    .any(|&m| state.layout.db_of_flat(m as usize) == db)
                {
                    return Err(PartitionError::ConstraintViolation { label, db });
                }
            }
            state.members[label].push(flat as u32);
            state.labels[flat] = Some(label);
        }
        state.k = state.active.len();
        Ok(state)
    }

    pub fn layout(&self) -> &DbLayout {
        &self.layout
    }

    pub fn constraint(&self) -> Constraint {
        self.constraint
    }

    pub fn n_records(&self) -> usize {
        self.layout.n_records()
    }

    /// Number of records currently assigned to a cluster.
    pub fn n_assigned(&self) -> usize {
        self.layout.n_records() - usize::from(self.detached.is_some())
    }

    /// Number of non-empty clusters.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn detached_record(&self) -> Option<RecordId> {
        self.detached.map(|f| self.layout.record_id(f))
    }

    /// Active cluster labels in increasing order.
    pub fn cluster_labels(&self) -> impl Iterator<Item = ClusterLabel> + '_ {
        self.active.iter().copied()
    }

    pub fn cluster_of(&self, r: RecordId) -> Result<Option<ClusterLabel>, PartitionError> {
        let flat = self.layout.flat(r).ok_or(PartitionError::UnknownRecord {
            db: r.db,
            pos: r.pos,
        })?;
        Ok(self.labels[flat])
    }

    /// Flat record indices in cluster `label`.
    pub fn members(&self, label: ClusterLabel) -> Result<&[u32], PartitionError> {
        if label < self.members.len() && !self.members[label].is_empty() {
            Ok(&self.members[label])
        } else {
            Err(PartitionError::UnknownLabel(label))
        }
    }

    pub fn cluster_size(&self, label: ClusterLabel) -> usize {
        if label < self.members.len() {
            self.members[label].len()
        } else {
            0
        }
    }

    /// Whether `label` holds a record from database `db`, ignoring `skip`.
    pub fn cluster_holds_db(&self, label: ClusterLabel, db: usize, skip: Option<RecordId>) -> bool {
        let skip_flat = skip.and_then(|r| self.layout.flat(r));
        self.members[label]
            .iter()
            .any(|&m| Some(m as usize) != skip_flat && self.layout.db_of_flat(m as usize) == db)
    }

    fn check_constraint(&self, label: ClusterLabel, r: RecordId) -> Result<(), PartitionError> {
        if self.constraint == Constraint::NoWithinDbDuplicates
            && self.cluster_holds_db(label, r.db, Some(r))
        {
            return Err(PartitionError::ConstraintViolation { label, db: r.db });
        }
        Ok(())
    }

    /// Remove `r` from its cluster, deleting the cluster if it empties.
    /// The record stays detached until `attach` is called.
    pub fn detach(&mut self, r: RecordId) -> Result<ClusterLabel, PartitionError> {
        if self.detached.is_some() {
            return Err(PartitionError::AlreadyDetached);
        }
        let flat = self.layout.flat(r).ok_or(PartitionError::UnknownRecord {
            db: r.db,
            pos: r.pos,
        })?;
        let label = self.labels[flat].ok_or(PartitionError::Detached {
            db: r.db,
            pos: r.pos,
        })?;
        let list = &mut self.members[label];
        let idx = list
            .iter()
            .position(|&m| m as usize == flat)
            .expect("member list");
        list.swap_remove(idx);
        if list.is_empty() {
            self.active.remove(&label);
            self.free.insert(label);
            self.k -= 1;
        }
        self.labels[flat] = None;
        self.detached = Some(flat);
        Ok(label)
    }

    /// Insert the detached record `r` into `target`. A `New` target takes the
    /// smallest unused label.
    pub fn attach(
        &mut self,
        r: RecordId,
        target: MoveTarget,
    ) -> Result<ClusterLabel, PartitionError> {
        let flat = self.layout.flat(r).ok_or(PartitionError::UnknownRecord {
            db: r.db,
            pos: r.pos,
        })?;
        if self.detached != Some(flat) {
            return Err(PartitionError::Detached {
                db: r.db,
                pos: r.pos,
            });
        }
        let label = match target {
            MoveTarget::Existing(label) => {
                if label >= self.members.len() || self.members[label].is_empty() {
                    return Err(PartitionError::UnknownLabel(label));
                }
                self.check_constraint(label, r)?;
                label
            }
            MoveTarget::New => {
                let label = *self.free.iter().next().expect("free label available");
                self.free.remove(&label);
                self.active.insert(label);
                self.k += 1;
                label
            }
        };
        self.members[label].push(flat as u32);
        self.labels[flat] = Some(label);
        self.detached = None;
        Ok(label)
    }

    /// Move `r` to `target` in one step. `k` changes by -1, 0, or +1.
    pub fn move_record(
        &mut self,
        r: RecordId,
        target: MoveTarget,
    ) -> Result<ClusterLabel, PartitionError> {
        // Validate the target before touching the state so a failed move is a no-op.
        if let MoveTarget::Existing(label) = target {
            if label >= self.members.len() || self.members[label].is_empty() {
                return Err(PartitionError::UnknownLabel(label));
            }
            self.check_constraint(label, r)?;
        }
        let old = self.detach(r)?;
        match self.attach(r, target) {
            Ok(label) => Ok(label),
            Err(e) => {
                // Target vanished because r was its only member; re-attach.
                self.attach(r, MoveTarget::Existing(old))
                    .or_else(|_| self.attach(r, MoveTarget::New))
                    .expect("restore after failed move");
                Err(e)
            }
        }
    }

    /// Unordered co-clustered record pairs, sorted.
    pub fn pairwise_links(&self) -> Vec<(RecordId, RecordId)> {
        let mut pairs = Vec::new();
        for &label in &self.active {
            let list = &self.members[label];
            for i in 0..list.len() {
                for j in (i + 1)..list.len() {
                    let a = self.layout.record_id(list[i] as usize);
                    let b = self.layout.record_id(list[j] as usize);
                    pairs.push(if a <= b { (a, b) } else { (b, a) });
                }
            }
        }
        pairs.sort_unstable();
        pairs
    }

    /// Raw per-record label slots in flat order; `None` while detached.
    pub fn labels_ref(&self) -> &[Option<ClusterLabel>] {
        &self.labels
    }

    /// Flat label vector; detached records map to `usize::MAX`.
    pub fn labels_vec(&self) -> Vec<usize> {
        self.labels
            .iter()
            .map(|l| l.unwrap_or(usize::MAX))
            .collect()
    }

    pub fn summary(&self) -> PartitionSummary {
        let mut sizes: Vec<usize> = self.active.iter().map(|&l| self.members[l].len()).collect();
        sizes.sort_unstable();
        let t = if self.constraint == Constraint::NoWithinDbDuplicates
            && self.layout.n_databases() == 2
        {
            Some(sizes.iter().filter(|&&s| s == 2).count())
        } else {
            None
        };
        PartitionSummary {
            k: self.k,
            cluster_sizes: sizes,
            t,
        }
    }
}
