//! Bounded per-view feature memory.
//!
//! A [`MemoryBank`] stores, for every spatial location of a fixed grid, a
//! time-ordered list of entries (feature vector, soft label, and the span
//! of frame indices the entry summarises). All locations always hold the
//! same number of entries, and that number never exceeds the bank's
//! capacity between appends. When an append would overflow, one of four
//! [`CompressionPolicy`] strategies brings the bank back to capacity:
//!
//! * `Ours` — at every location independently, merge the adjacent pair of
//!   entries whose features are closest (arithmetic mean of features and
//!   labels, union of spans). Redundant history collapses while rare,
//!   distinctive entries survive indefinitely.
//! * `Fifo` — drop the oldest frame everywhere.
//! * `Cluster` — average-pool each frame to one vector, run seeded
//!   k-means with k = capacity, keep the frame closest to each centroid,
//!   and drop the one frame left over.
//! * `IouSelect` — gate admission on a per-frame confidence score and,
//!   on overflow, evict the oldest frame other than the first admitted
//!   one, which is pinned.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::FeatureMap;

/// Which camera a bank belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Ego,
    Exo,
}

/// One compressed observation at one spatial location.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    /// Channel vector (length = the bank's channel count).
    pub feature: Vec<f64>,
    /// Soft foreground label in `[0, 1]`.
    pub label: f64,
    /// First frame index summarised by this entry.
    pub first_t: u32,
    /// Last frame index summarised by this entry.
    pub last_t: u32,
}

/// How a full bank makes room for the next frame.
#[derive(Debug, Clone, PartialEq)]
pub enum CompressionPolicy {
    Ours,
    Fifo,
    Cluster { seed: u64 },
    IouSelect { threshold: f64 },
}

impl CompressionPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            CompressionPolicy::Ours => "ours",
            CompressionPolicy::Fifo => "fifo",
            CompressionPolicy::Cluster { .. } => "cluster",
            CompressionPolicy::IouSelect { .. } => "iou_select",
        }
    }

    /// The four policies as usually benchmarked together: `ours`, `fifo`,
    /// `cluster` (with the given seed), and `iou_select` at threshold 0.5.
    pub fn standard_set(cluster_seed: u64) -> Vec<CompressionPolicy> {
        vec![
            CompressionPolicy::Ours,
            CompressionPolicy::Fifo,
            CompressionPolicy::Cluster { seed: cluster_seed },
            CompressionPolicy::IouSelect { threshold: 0.5 },
        ]
    }
}

/// A borrowed view of one entry, as consumed by attention readout.
#[derive(Debug, Clone, Copy)]
pub struct Token<'a> {
    pub feature: &'a [f64],
    pub label: f64,
}

/// Per-location bounded memory for one view. See the module docs for the
/// compression policies.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    h: usize,
    w: usize,
    channels: usize,
    capacity: usize,
    view: View,
    /// Indexed by location `i * w + j`; every inner list has the same
    /// length, entries ordered by strictly increasing frame spans.
    slots: Vec<Vec<MemoryEntry>>,
}

impl MemoryBank {
    pub fn new(h: usize, w: usize, channels: usize, capacity: usize, view: View) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::ZeroDim { what: "memory bank height/width" });
        }
        if channels == 0 {
            return Err(Error::ZeroDim { what: "memory bank channels" });
        }
        if capacity == 0 {
            return Err(Error::ZeroDim { what: "memory bank capacity" });
        }
        Ok(Self { h, w, channels, capacity, view, slots: vec![Vec::new(); h * w] })
    }

    /// Rebuild a bank from raw per-location entries, validating every
    /// invariant (uniform lengths of at most capacity + 1, channel counts,
    /// finite features, labels in range, strictly increasing spans).
    pub fn from_entries(
        h: usize,
        w: usize,
        channels: usize,
        capacity: usize,
        view: View,
        slots: Vec<Vec<MemoryEntry>>,
    ) -> Result<Self> {
        let mut bank = Self::new(h, w, channels, capacity, view)?;
        if slots.len() != h * w {
            return Err(Error::DataLength { expected: h * w, got: slots.len() });
        }
        let len = slots[0].len();
        if len > capacity + 1 {
            return Err(Error::BankLength { expected: capacity + 1, got: len });
        }
        for loc in &slots {
            if loc.len() != len {
                return Err(Error::BankLength { expected: len, got: loc.len() });
            }
            let mut prev_last: Option<u32> = None;
            for e in loc {
                if e.feature.len() != channels {
                    return Err(Error::ChannelMismatch { expected: channels, got: e.feature.len() });
                }
                if !e.feature.iter().all(|v| v.is_finite()) {
                    return Err(Error::NonFinite { context: "memory entry feature" });
                }
                if !(e.label >= 0.0 && e.label <= 1.0) {
                    return Err(Error::LabelRange { got: e.label });
                }
                if e.first_t > e.last_t {
                    return Err(Error::NonMonotonicFrame { last: e.first_t, got: e.last_t });
                }
                if let Some(last) = prev_last {
                    if e.first_t <= last {
                        return Err(Error::NonMonotonicFrame { last, got: e.first_t });
                    }
                }
                prev_last = Some(e.last_t);
            }
        }
        bank.slots = slots;
        Ok(bank)
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn view(&self) -> View {
        self.view
    }

    pub fn locations(&self) -> usize {
        self.h * self.w
    }

    /// Entries currently stored per location (identical at every location).
    pub fn len(&self) -> usize {
        self.slots[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The entry list at flat location index `i * w + j`.
    pub fn location(&self, idx: usize) -> &[MemoryEntry] {
        &self.slots[idx]
    }

    /// Frame index of the newest stored entry.
    pub fn last_t(&self) -> Option<u32> {
        self.slots[0].last().map(|e| e.last_t)
    }

    fn check_frame(&self, features: &FeatureMap, labels: &[f64], t: u32) -> Result<()> {
        if features.h() != self.h || features.w() != self.w {
            return Err(Error::SpatialMismatch {
                a: (self.h, self.w),
                b: (features.h(), features.w()),
            });
        }
        if features.c() != self.channels {
            return Err(Error::ChannelMismatch { expected: self.channels, got: features.c() });
        }
        if labels.len() != self.locations() {
            return Err(Error::DataLength { expected: self.locations(), got: labels.len() });
        }
        for &l in labels {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::LabelRange { got: l });
            }
        }
        if let Some(last) = self.last_t() {
            if t <= last {
                return Err(Error::NonMonotonicFrame { last, got: t });
            }
        }
        Ok(())
    }

    /// Store a frame unconditionally. The bank may transiently hold
    /// capacity + 1 entries afterwards; storing beyond that is rejected.
    pub fn push_frame(&mut self, features: &FeatureMap, labels: &[f64], t: u32) -> Result<()> {
        if self.len() > self.capacity {
            return Err(Error::BankLength { expected: self.capacity, got: self.len() });
        }
        self.check_frame(features, labels, t)?;
        for i in 0..self.h {
            for j in 0..self.w {
                self.slots[i * self.w + j].push(MemoryEntry {
                    feature: features.location(i, j).to_vec(),
                    label: labels[i * self.w + j],
                    first_t: t,
                    last_t: t,
                });
            }
        }
        Ok(())
    }

    /// Admit a frame under `policy`, compressing back to capacity if the
    /// bank overflows. Returns whether the frame was admitted: under
    /// `IouSelect` a frame with `score` below the threshold is skipped
    /// outright (a missing score always admits — readout confidence only
    /// exists once a prediction has been made).
    pub fn append(
        &mut self,
        features: &FeatureMap,
        labels: &[f64],
        t: u32,
        policy: &CompressionPolicy,
        score: Option<f64>,
    ) -> Result<bool> {
        if let CompressionPolicy::IouSelect { threshold } = policy {
            if !(threshold.is_finite() && (0.0..=1.0).contains(threshold)) {
                return Err(Error::InvalidConfig { what: "iou_select threshold outside [0, 1]" });
            }
            if let Some(s) = score {
                if !s.is_finite() {
                    return Err(Error::NonFinite { context: "admission score" });
                }
                if s < *threshold {
                    return Ok(false);
                }
            }
        }
        self.push_frame(features, labels, t)?;
        if self.len() == self.capacity + 1 {
            match policy {
                CompressionPolicy::Ours => self.compress_once()?,
                CompressionPolicy::Fifo => self.drop_frame(0),
                CompressionPolicy::Cluster { seed } => self.cluster_reduce(*seed)?,
                // The first admitted frame is pinned; evict the oldest of
                // the rest. Capacity >= 1 guarantees index 1 exists here.
                CompressionPolicy::IouSelect { .. } => self.drop_frame(1),
            }
        }
        Ok(true)
    }

    /// Remove the entry at temporal index `idx` from every location.
    fn drop_frame(&mut self, idx: usize) {
        for loc in &mut self.slots {
            loc.remove(idx);
        }
    }

    fn require_overflow(&self) -> Result<()> {
        if self.len() != self.capacity + 1 {
            return Err(Error::BankLength { expected: self.capacity + 1, got: self.len() });
        }
        Ok(())
    }

    /// At every location independently, merge the adjacent pair of entries
    /// with the smallest feature distance (ties resolved towards the older
    /// pair). Merging averages features and labels and unions the spans.
    /// Requires the bank to be at capacity + 1.
    pub fn compress_once(&mut self) -> Result<()> {
        self.require_overflow()?;
        for loc in &mut self.slots {
            let k = nearest_adjacent_pair(loc);
            merge_pair(loc, k);
        }
        Ok(())
    }

    /// Variant kept for comparison experiments: one merge index chosen for
    /// the whole frame by summing adjacent distances over all locations,
    /// then applied at every location. The per-location rule above is what
    /// [`MemoryBank::append`] uses.
    pub fn compress_once_framewise(&mut self) -> Result<()> {
        self.require_overflow()?;
        let len = self.len();
        let mut best_k = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..len - 1 {
            let mut total = 0.0;
            for loc in &self.slots {
                total += feature_distance_sq(&loc[k].feature, &loc[k + 1].feature);
            }
            if total < best_d {
                best_d = total;
                best_k = k;
            }
        }
        for loc in &mut self.slots {
            merge_pair(loc, best_k);
        }
        Ok(())
    }

    /// Average-pool each frame over locations, k-means the pooled vectors
    /// with k = capacity (seeded k-means++ initialisation, 20 Lloyd
    /// iterations), keep the frame nearest each centroid, and drop the one
    /// frame left unclaimed. Requires the bank to be at capacity + 1.
    pub fn cluster_reduce(&mut self, seed: u64) -> Result<()> {
        self.require_overflow()?;
        let len = self.len();
        let pooled = self.frame_pools();
        let retained = kmeans_retain(&pooled, self.capacity, seed);
        debug_assert_eq!(retained.len(), self.capacity);
        let dropped = (0..len)
            .find(|idx| !retained.contains(idx))
            .expect("capacity entries retained out of capacity + 1");
        self.drop_frame(dropped);
        Ok(())
    }

    /// Mean feature over all locations for each temporal index.
    fn frame_pools(&self) -> Vec<Vec<f64>> {
        let n = self.locations() as f64;
        let mut pools = vec![vec![0.0; self.channels]; self.len()];
        for loc in &self.slots {
            for (pool, entry) in pools.iter_mut().zip(loc) {
                for (p, &v) in pool.iter_mut().zip(&entry.feature) {
                    *p += v;
                }
            }
        }
        for pool in &mut pools {
            for p in pool {
                *p /= n;
            }
        }
        pools
    }

    /// All entries as readout tokens, location-major and oldest-first
    /// within a location.
    pub fn tokens(&self) -> Vec<Token<'_>> {
        let mut out = Vec::with_capacity(self.locations() * self.len());
        for loc in &self.slots {
            for e in loc {
                out.push(Token { feature: &e.feature, label: e.label });
            }
        }
        out
    }
}

fn feature_distance_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index `k` minimising the distance between entries `k` and `k + 1`.
/// Scanning oldest-first with a strict comparison keeps the smallest `k`
/// on ties; squared distances order identically to distances.
fn nearest_adjacent_pair(entries: &[MemoryEntry]) -> usize {
    let mut best_k = 0;
    let mut best_d = f64::INFINITY;
    for k in 0..entries.len() - 1 {
        let d = feature_distance_sq(&entries[k].feature, &entries[k + 1].feature);
        if d < best_d {
            best_d = d;
            best_k = k;
        }
    }
    best_k
}

fn merge_pair(entries: &mut Vec<MemoryEntry>, k: usize) {
    let second = entries.remove(k + 1);
    let first = &mut entries[k];
    for (f, s) in first.feature.iter_mut().zip(&second.feature) {
        *f = (*f + s) * 0.5;
    }
    first.label = (first.label + second.label) * 0.5;
    first.last_t = second.last_t;
}

/// Seeded k-means++ then 20 Lloyd iterations over `points`; returns the
/// indices of the `k` distinct points retained as cluster representatives,
/// chosen greedily per centroid (nearest unclaimed point, earliest index
/// on ties).
fn kmeans_retain(points: &[Vec<f64>], k: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    debug_assert!(k < n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding. A zero total weight (all remaining points coincide
    // with a centroid) falls back to the earliest unchosen index.
    let mut chosen: Vec<usize> = vec![rng.random_range(0..n)];
    while chosen.len() < k {
        let weights: Vec<f64> = (0..n)
            .map(|i| {
                chosen
                    .iter()
                    .map(|&c| feature_distance_sq(&points[i], &points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in weights.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k < n leaves an unchosen point")
        };
        if !chosen.contains(&next) {
            chosen.push(next);
        } else {
            // Weighted sampling can only land on a chosen point when every
            // remaining weight is zero around it; take the earliest free one.
            let free = (0..n).find(|i| !chosen.contains(i)).expect("k < n");
            chosen.push(free);
        }
    }
    let mut centroids: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();

    let mut assignment = vec![0usize; n];
    for _ in 0..20 {
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centroids.iter().enumerate() {
                let d = feature_distance_sq(p, c);
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            assignment[i] = best;
        }
        for (ci, c) in centroids.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> =
                points.iter().enumerate().filter(|(i, _)| assignment[*i] == ci).map(|(_, p)| p).collect();
            if members.is_empty() {
                continue;
            }
            for (d, v) in c.iter_mut().enumerate() {
                *v = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
            }
        }
    }

    let mut retained: Vec<usize> = Vec::with_capacity(k);
    for c in &centroids {
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            if retained.contains(&i) {
                continue;
            }
            let d = feature_distance_sq(p, c);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, i));
            }
        }
        retained.push(best.expect("fewer retained than points").1);
    }
    retained.sort_unstable();
    retained
}

/// The ego and exo banks of one correspondence run, sharing grid shape,
/// channel count, and capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct DualMemory {
    pub ego: MemoryBank,
    pub exo: MemoryBank,
}

impl DualMemory {
    pub fn new(h: usize, w: usize, channels: usize, capacity: usize) -> Result<Self> {
        Ok(Self {
            ego: MemoryBank::new(h, w, channels, capacity, View::Ego)?,
            exo: MemoryBank::new(h, w, channels, capacity, View::Exo)?,
        })
    }

    /// Tokens of both banks, ego first.
    pub fn tokens(&self) -> Vec<Token<'_>> {
        let mut out = self.ego.tokens();
        out.extend(self.exo.tokens());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_of(h: usize, w: usize, c: usize, f: impl FnMut(usize, usize, usize) -> f64) -> FeatureMap {
        FeatureMap::from_fn(h, w, c, f).unwrap()
    }

    fn constant_frame(h: usize, w: usize, c: usize, v: f64) -> FeatureMap {
        map_of(h, w, c, |_, _, _| v)
    }

    /// Bank with a single location, seeded with the given per-frame scalar
    /// features (channel count 1), frames numbered 1..
    fn scalar_bank(capacity: usize, values: &[f64]) -> MemoryBank {
        let mut bank = MemoryBank::new(1, 1, 1, capacity, View::Ego).unwrap();
        for (t, &v) in values.iter().enumerate() {
            bank.push_frame(&constant_frame(1, 1, 1, v), &[0.0], (t + 1) as u32).unwrap();
        }
        bank
    }

    #[test]
    fn merge_averages_and_unions_spans() {
        let mut entries = vec![
            MemoryEntry { feature: vec![1.0, 3.0], label: 0.25, first_t: 5, last_t: 6 },
            MemoryEntry { feature: vec![3.0, 5.0], label: 0.75, first_t: 7, last_t: 9 },
        ];
        merge_pair(&mut entries, 0);
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].feature, vec![2.0, 4.0]);
        assert_eq!(entries[0].label, 0.5);
        assert_eq!((entries[0].first_t, entries[0].last_t), (5, 9));
    }

    #[test]
    fn closest_adjacent_pair_is_merged() {
        // Distances between neighbours: |0-5|, |5-6|, |6-20| -> merge (5, 6).
        let mut bank = scalar_bank(3, &[0.0, 5.0, 6.0, 20.0]);
        bank.compress_once().unwrap();
        let loc = bank.location(0);
        assert_eq!(loc.len(), 3);
        assert_eq!(loc[0].feature, vec![0.0]);
        assert_eq!(loc[1].feature, vec![5.5]);
        assert_eq!((loc[1].first_t, loc[1].last_t), (2, 3));
        assert_eq!(loc[2].feature, vec![20.0]);
    }

    #[test]
    fn distance_ties_merge_the_older_pair() {
        let mut bank = scalar_bank(2, &[0.0, 3.0, 6.0]);
        bank.compress_once().unwrap();
        let loc = bank.location(0);
        assert_eq!(loc[0].feature, vec![1.5]);
        assert_eq!((loc[0].first_t, loc[0].last_t), (1, 2));
        assert_eq!(loc[1].feature, vec![6.0]);
    }

    #[test]
    fn locations_compress_independently() {
        // Location (0,0) is closest between frames 1 and 2; location (0,1)
        // between frames 2 and 3. Each merges its own pair.
        let mut bank = MemoryBank::new(1, 2, 1, 2, View::Ego).unwrap();
        let frames = [[0.0, 10.0], [0.1, 5.0], [9.0, 5.2]];
        for (t, vals) in frames.iter().enumerate() {
            let f = map_of(1, 2, 1, |_, j, _| vals[j]);
            bank.push_frame(&f, &[0.0, 0.0], (t + 1) as u32).unwrap();
        }
        bank.compress_once().unwrap();
        let left = bank.location(0);
        assert_eq!((left[0].first_t, left[0].last_t), (1, 2));
        assert_eq!(left[0].feature, vec![0.05]);
        assert_eq!((left[1].first_t, left[1].last_t), (3, 3));
        let right = bank.location(1);
        assert_eq!((right[0].first_t, right[0].last_t), (1, 1));
        assert_eq!((right[1].first_t, right[1].last_t), (2, 3));
        assert_eq!(right[1].feature, vec![5.1]);
    }

    #[test]
    fn framewise_variant_uses_one_global_pair() {
        let build = || {
            let mut bank = MemoryBank::new(1, 2, 1, 2, View::Ego).unwrap();
            // Summed adjacent distances: pair (1,2): 0.1^2 + 5^2; pair
            // (2,3): 8.9^2 + 0.2^2 -> global merge picks (1,2) everywhere.
            let frames = [[0.0, 10.0], [0.1, 5.0], [9.0, 5.2]];
            for (t, vals) in frames.iter().enumerate() {
                let f = map_of(1, 2, 1, |_, j, _| vals[j]);
                bank.push_frame(&f, &[0.0, 0.0], (t + 1) as u32).unwrap();
            }
            bank
        };
        let mut frame_level = build();
        frame_level.compress_once_framewise().unwrap();
        let right = frame_level.location(1);
        assert_eq!((right[0].first_t, right[0].last_t), (1, 2));
        assert_eq!(right[0].feature, vec![7.5]);

        let mut per_location = build();
        per_location.compress_once().unwrap();
        assert_ne!(per_location, frame_level);
    }

    #[test]
    fn fifo_is_a_pure_queue() {
        let mut bank = MemoryBank::new(1, 1, 1, 3, View::Ego).unwrap();
        for t in 1..=4u32 {
            bank.append(
                &constant_frame(1, 1, 1, t as f64),
                &[0.0],
                t,
                &CompressionPolicy::Fifo,
                None,
            )
            .unwrap();
        }
        let loc = bank.location(0);
        assert_eq!(loc.len(), 3);
        let ts: Vec<u32> = loc.iter().map(|e| e.first_t).collect();
        assert_eq!(ts, vec![2, 3, 4]);
    }

    #[test]
    fn iou_select_gates_admission_and_pins_the_first_frame() {
        let policy = CompressionPolicy::IouSelect { threshold: 0.5 };
        let mut bank = MemoryBank::new(1, 1, 1, 2, View::Exo).unwrap();
        let frame = |v: f64| constant_frame(1, 1, 1, v);
        assert!(bank.append(&frame(1.0), &[0.0], 1, &policy, None).unwrap());
        assert!(bank.append(&frame(2.0), &[0.0], 2, &policy, Some(0.9)).unwrap());
        // Below threshold: rejected without touching the bank.
        assert!(!bank.append(&frame(3.0), &[0.0], 3, &policy, Some(0.3)).unwrap());
        assert_eq!(bank.len(), 2);
        // Admitted at overflow: frame 2 (not the pinned frame 1) is evicted.
        assert!(bank.append(&frame(4.0), &[0.0], 4, &policy, Some(0.6)).unwrap());
        let ts: Vec<u32> = bank.location(0).iter().map(|e| e.first_t).collect();
        assert_eq!(ts, vec![1, 4]);
    }

    #[test]
    fn iou_select_rejects_bad_threshold_and_score() {
        let mut bank = MemoryBank::new(1, 1, 1, 2, View::Exo).unwrap();
        let frame = constant_frame(1, 1, 1, 0.0);
        let bad = CompressionPolicy::IouSelect { threshold: 1.5 };
        assert!(bank.append(&frame, &[0.0], 1, &bad, Some(0.7)).is_err());
        let ok = CompressionPolicy::IouSelect { threshold: 0.5 };
        assert!(bank.append(&frame, &[0.0], 1, &ok, Some(f64::NAN)).is_err());
    }

    #[test]
    fn cluster_drops_exactly_one_pristine_frame() {
        let mut bank = MemoryBank::new(2, 2, 2, 4, View::Ego).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let mut originals = Vec::new();
        for t in 1..=5u32 {
            let f = FeatureMap::random(2, 2, 2, -1.0, 1.0, &mut r).unwrap();
            originals.push(f.clone());
            bank.push_frame(&f, &[0.0; 4], t).unwrap();
        }
        let mut twin = bank.clone();
        bank.cluster_reduce(99).unwrap();
        assert_eq!(bank.len(), 4);
        // Retained entries are original frames, never merged blends.
        for e in bank.location(0) {
            let t = e.first_t as usize - 1;
            assert_eq!(e.last_t, e.first_t);
            assert_eq!(e.feature, originals[t].location(0, 0).to_vec());
        }
        // Same seed, same outcome.
        twin.cluster_reduce(99).unwrap();
        assert_eq!(twin, bank);
    }

    #[test]
    fn cluster_handles_identical_frames() {
        let mut bank = MemoryBank::new(1, 2, 1, 3, View::Ego).unwrap();
        for t in 1..=4u32 {
            bank.push_frame(&constant_frame(1, 2, 1, 1.0), &[0.0, 0.0], t).unwrap();
        }
        bank.cluster_reduce(5).unwrap();
        assert_eq!(bank.len(), 3);
    }

    #[test]
    fn identical_frames_compress_exactly() {
        let mut bank = MemoryBank::new(2, 2, 3, 3, View::Ego).unwrap();
        let frame = map_of(2, 2, 3, |_, _, k| 0.5 + k as f64);
        for t in 1..=30u32 {
            bank.append(&frame, &[0.25; 4], t, &CompressionPolicy::Ours, None).unwrap();
        }
        assert_eq!(bank.len(), 3);
        for loc in 0..4 {
            for e in bank.location(loc) {
                assert_eq!(e.feature, bank.location(0)[0].feature);
                assert_eq!(e.label, 0.25);
            }
            // Merged spans tile the full frame range without gaps.
            let entries = bank.location(loc);
            assert_eq!(entries[0].first_t, 1);
            assert_eq!(entries.last().unwrap().last_t, 30);
            for pair in entries.windows(2) {
                assert_eq!(pair[1].first_t, pair[0].last_t + 1);
            }
        }
    }

    #[test]
    fn short_streams_are_policy_independent() {
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let frames: Vec<FeatureMap> =
            (0..3).map(|_| FeatureMap::random(2, 3, 2, -1.0, 1.0, &mut r).unwrap()).collect();
        let labels: Vec<Vec<f64>> = (0..3).map(|_| (0..6).map(|_| r.random_range(0.0..1.0)).collect()).collect();
        let mut banks = Vec::new();
        for policy in CompressionPolicy::standard_set(3) {
            let mut bank = MemoryBank::new(2, 3, 2, 3, View::Ego).unwrap();
            for (t, (f, l)) in frames.iter().zip(&labels).enumerate() {
                assert!(bank.append(f, l, (t + 1) as u32, &policy, Some(0.9)).unwrap());
            }
            banks.push(bank);
        }
        for b in &banks[1..] {
            assert_eq!(*b, banks[0]);
        }
    }

    #[test]
    fn push_frame_validates_inputs() {
        let mut bank = MemoryBank::new(2, 2, 2, 2, View::Ego).unwrap();
        let good = constant_frame(2, 2, 2, 0.0);
        bank.push_frame(&good, &[0.0; 4], 5).unwrap();
        // Non-increasing frame index.
        assert!(matches!(
            bank.push_frame(&good, &[0.0; 4], 5),
            Err(Error::NonMonotonicFrame { last: 5, got: 5 })
        ));
        // Wrong spatial shape / channels / label count / label range.
        assert!(bank.push_frame(&constant_frame(1, 2, 2, 0.0), &[0.0; 2], 6).is_err());
        assert!(bank.push_frame(&constant_frame(2, 2, 3, 0.0), &[0.0; 4], 6).is_err());
        assert!(bank.push_frame(&good, &[0.0; 3], 6).is_err());
        assert!(matches!(
            bank.push_frame(&good, &[0.0, 0.0, 1.5, 0.0], 6),
            Err(Error::LabelRange { .. })
        ));
        // Transient overflow is allowed once, then rejected.
        bank.push_frame(&good, &[0.0; 4], 6).unwrap();
        bank.push_frame(&good, &[0.0; 4], 7).unwrap();
        assert!(matches!(bank.push_frame(&good, &[0.0; 4], 8), Err(Error::BankLength { .. })));
    }

    #[test]
    fn compression_requires_overflow_state() {
        let mut bank = scalar_bank(3, &[1.0, 2.0]);
        assert!(matches!(bank.compress_once(), Err(Error::BankLength { expected: 4, got: 2 })));
        assert!(bank.compress_once_framewise().is_err());
        assert!(bank.cluster_reduce(0).is_err());
    }

    #[test]
    fn tokens_are_location_major_time_minor() {
        let mut bank = MemoryBank::new(1, 2, 1, 2, View::Ego).unwrap();
        bank.push_frame(&map_of(1, 2, 1, |_, j, _| j as f64), &[0.1, 0.2], 1).unwrap();
        bank.push_frame(&map_of(1, 2, 1, |_, j, _| 10.0 + j as f64), &[0.3, 0.4], 2).unwrap();
        let tokens = bank.tokens();
        let feats: Vec<f64> = tokens.iter().map(|t| t.feature[0]).collect();
        assert_eq!(feats, vec![0.0, 10.0, 1.0, 11.0]);
        let labels: Vec<f64> = tokens.iter().map(|t| t.label).collect();
        assert_eq!(labels, vec![0.1, 0.3, 0.2, 0.4]);
    }

    #[test]
    fn from_entries_validates_invariants() {
        let entry = |t: u32| MemoryEntry { feature: vec![0.0], label: 0.5, first_t: t, last_t: t };
        // Valid round trip.
        let bank = MemoryBank::from_entries(
            1,
            1,
            1,
            2,
            View::Exo,
            vec![vec![entry(1), entry(2)]],
        )
        .unwrap();
        assert_eq!(bank.len(), 2);
        // Overlapping spans.
        assert!(MemoryBank::from_entries(1, 1, 1, 2, View::Exo, vec![vec![entry(2), entry(2)]]).is_err());
        // Ragged lengths across locations.
        assert!(MemoryBank::from_entries(1, 2, 1, 2, View::Exo, vec![vec![entry(1)], vec![]]).is_err());
        // Too many entries.
        assert!(MemoryBank::from_entries(
            1,
            1,
            1,
            1,
            View::Exo,
            vec![vec![entry(1), entry(2), entry(3)]]
        )
        .is_err());
        // Label out of range.
        assert!(MemoryBank::from_entries(
            1,
            1,
            1,
            2,
            View::Exo,
            vec![vec![MemoryEntry { feature: vec![0.0], label: -0.1, first_t: 1, last_t: 1 }]]
        )
        .is_err());
    }

    #[test]
    fn dual_memory_concatenates_ego_then_exo_tokens() {
        let mut dual = DualMemory::new(1, 1, 1, 2).unwrap();
        dual.ego.push_frame(&constant_frame(1, 1, 1, 1.0), &[1.0], 1).unwrap();
        dual.exo.push_frame(&constant_frame(1, 1, 1, 2.0), &[0.0], 1).unwrap();
        let tokens = dual.tokens();
        assert_eq!(tokens.len(), 2);
        assert_eq!(tokens[0].feature[0], 1.0);
        assert_eq!(tokens[1].feature[0], 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Capacity never exceeds M after any append sequence, under every
        /// policy, and reaches exactly min(admitted, M).
        #[test]
        fn capacity_is_respected(
            policy_idx in 0usize..4,
            m in 1usize..5,
            frames in 2usize..24,
            seed in 0u64..1000,
        ) {
            let policy = &CompressionPolicy::standard_set(seed)[policy_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = MemoryBank::new(2, 2, 2, m, View::Ego).unwrap();
            let mut admitted = 0usize;
            for t in 1..=frames {
                let f = FeatureMap::random(2, 2, 2, -1.0, 1.0, &mut rng).unwrap();
                let labels: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
                if bank.append(&f, &labels, t as u32, policy, Some(0.8)).unwrap() {
                    admitted += 1;
                }
                prop_assert!(bank.len() <= m);
            }
            prop_assert_eq!(bank.len(), admitted.min(m));
        }

        /// Spans stay well-formed and strictly increasing at every location
        /// regardless of policy.
        #[test]
        fn spans_stay_ordered(
            policy_idx in 0usize..4,
            m in 1usize..5,
            frames in 1usize..20,
            seed in 0u64..1000,
        ) {
            let policy = &CompressionPolicy::standard_set(seed)[policy_idx];
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            let mut bank = MemoryBank::new(2, 1, 1, m, View::Exo).unwrap();
            for t in 1..=frames {
                let f = FeatureMap::random(2, 1, 1, -1.0, 1.0, &mut rng).unwrap();
                bank.append(&f, &[0.5, 0.5], t as u32, policy, None).unwrap();
            }
            for loc in 0..bank.locations() {
                let entries = bank.location(loc);
                for e in entries {
                    prop_assert!(e.first_t <= e.last_t);
                }
                for pair in entries.windows(2) {
                    prop_assert!(pair[0].last_t < pair[1].first_t);
                }
            }
        }

        /// Under the per-location policy, spans tile the admitted range
        /// contiguously (merges only ever fuse adjacent spans).
        #[test]
        fn ours_spans_tile_contiguously(
            m in 2usize..6,
            frames in 2usize..30,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bank = MemoryBank::new(1, 2, 2, m, View::Ego).unwrap();
            for t in 1..=frames {
                let f = FeatureMap::random(1, 2, 2, -1.0, 1.0, &mut rng).unwrap();
                bank.append(&f, &[0.0, 0.0], t as u32, &CompressionPolicy::Ours, None).unwrap();
            }
            for loc in 0..bank.locations() {
                let entries = bank.location(loc);
                prop_assert_eq!(entries[0].first_t, 1);
                prop_assert_eq!(entries.last().unwrap().last_t, frames as u32);
                for pair in entries.windows(2) {
                    prop_assert_eq!(pair[1].first_t, pair[0].last_t + 1);
                }
            }
        }
    }
}
