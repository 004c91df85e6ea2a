//! IoU-based multi-object tracking over per-frame detections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Intersection over union; zero when either box has no area.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = BBox::new(a.x0.max(b.x0), a.y0.max(b.y0), a.x1.min(b.x1), a.y1.min(b.y1)).area();
    let union = a.area() + b.area() - inter;
    if union > 0.0 && inter > 0.0 {
        inter / union
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Pairs with a lower IoU are never matched.
    pub iou_threshold: f64,
    /// A track ends after this many consecutive frames without a match.
    pub max_misses: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { iou_threshold: 0.1, max_misses: 5 }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::invalid("iou_threshold", format!("must lie in [0, 1], got {}", self.iou_threshold)));
        }
        if self.max_misses == 0 {
            return Err(Error::invalid("max_misses", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackEntry {
    pub frame_index: i64,
    /// Index of the detection within its frame.
    pub detection: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub track_id: u64,
    pub entries: Vec<TrackEntry>,
    /// Box of the latest match, kept through gaps.
    pub last_bbox: BBox,
    pub misses: usize,
}

impl Track {
    pub fn first_frame(&self) -> i64 {
        self.entries[0].frame_index
    }

    pub fn last_frame(&self) -> i64 {
        self.entries[self.entries.len() - 1].frame_index
    }
}

/// Outcome of one association step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Association {
    /// `(track_id, detection index)` pairs, in match order.
    pub matched: Vec<(u64, usize)>,
    pub started: Vec<u64>,
    pub terminated: Vec<u64>,
}

/// Greedy matching by descending IoU. Ties go to the lower track id, then to
/// the lower detection index. Returns `(track position, detection index)`.
fn greedy_match(tracks: &[Track], detections: &[BBox], threshold: f64) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (ti, t) in tracks.iter().enumerate() {
        for (di, d) in detections.iter().enumerate() {
            let v = iou(&t.last_bbox, d);
            if v > 0.0 && v >= threshold {
                pairs.push((v, ti, di));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(tracks[a.1].track_id.cmp(&tracks[b.1].track_id)).then(a.2.cmp(&b.2)));
    let mut track_used = vec![false; tracks.len()];
    let mut det_used = vec![false; detections.len()];
    let mut out = Vec::new();
    for (_, ti, di) in pairs {
        if !track_used[ti] && !det_used[di] {
            track_used[ti] = true;
            det_used[di] = true;
            out.push((ti, di));
        }
    }
    out
}

/// Frame-by-frame tracker. Feed frames in increasing order with
/// [`Tracker::step`], then collect every track with [`Tracker::finish`].
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    active: Vec<Track>,
    finished: Vec<Track>,
    next_id: u64,
    last_frame: Option<i64>,
}

impl Tracker {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, active: Vec::new(), finished: Vec::new(), next_id: 0, last_frame: None })
    }

    pub fn active(&self) -> &[Track] {
        &self.active
    }

    pub fn step(&mut self, frame_index: i64, detections: &[BBox]) -> Result<Association> {
        if let Some(prev) = self.last_frame {
            if frame_index <= prev {
                return Err(Error::invalid("frame_index", format!("{frame_index} does not follow {prev}")));
            }
        }
        for d in detections {
            d.validate("detection")?;
        }
        self.last_frame = Some(frame_index);

        let matches = greedy_match(&self.active, detections, self.config.iou_threshold);
        let mut out = Association::default();
        let mut matched_track = vec![false; self.active.len()];
        let mut matched_det = vec![false; detections.len()];
        for &(ti, di) in &matches {
            matched_track[ti] = true;
            matched_det[di] = true;
            let t = &mut self.active[ti];
            t.entries.push(TrackEntry { frame_index, detection: di, bbox: detections[di] });
            t.last_bbox = detections[di];
            t.misses = 0;
            out.matched.push((t.track_id, di));
        }

        let mut kept = Vec::with_capacity(self.active.len());
        for (t, matched) in self.active.drain(..).zip(matched_track) {
            let mut t = t;
            if !matched {
                t.misses += 1;
                if t.misses >= self.config.max_misses {
                    out.terminated.push(t.track_id);
                    self.finished.push(t);
                    continue;
                }
            }
            kept.push(t);
        }
        self.active = kept;

        for (di, d) in detections.iter().enumerate() {
            if matched_det[di] {
                continue;
            }
            let id = self.next_id;
            self.next_id += 1;
            self.active.push(Track { track_id: id, entries: vec![TrackEntry { frame_index, detection: di, bbox: *d }], last_bbox: *d, misses: 0 });
            out.started.push(id);
        }
        Ok(out)
    }

    /// All tracks, finished and still active, ordered by id.
    pub fn finish(mut self) -> Vec<Track> {
        self.finished.append(&mut self.active);
        self.finished.sort_by_key(|t| t.track_id);
        self.finished
    }
}

/// Runs the tracker over `(frame_index, detections)` pairs.
pub fn track_all<'a, I>(frames: I, config: TrackerConfig) -> Result<Vec<Track>>
where
    I: IntoIterator<Item = (i64, &'a [BBox])>,
{
    let mut tracker = Tracker::new(config)?;
    for (frame, dets) in frames {
        tracker.step(frame, dets)?;
    }
    Ok(tracker.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1)
    }

    #[test]
    fn iou_values() {
        assert_eq!(iou(&b(0.0, 0.0, 10.0, 10.0), &b(0.0, 0.0, 10.0, 10.0)), 1.0);
        assert_eq!(iou(&b(0.0, 0.0, 10.0, 10.0), &b(20.0, 0.0, 30.0, 10.0)), 0.0);
        assert!((iou(&b(0.0, 0.0, 10.0, 10.0), &b(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&b(0.0, 0.0, 0.0, 10.0), &b(0.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn two_birds_keep_identities() {
        let cfg = TrackerConfig::default();
        let frames: Vec<Vec<BBox>> = (0..10)
            .map(|t| {
                let s = t as f64 * 2.0;
                vec![b(s, 0.0, s + 20.0, 20.0), b(100.0 - s, 50.0, 120.0 - s, 70.0)]
            })
            .collect();
        let tracks = track_all(frames.iter().enumerate().map(|(i, d)| (i as i64, d.as_slice())), cfg).unwrap();
        assert_eq!(tracks.len(), 2);
        for t in &tracks {
            assert_eq!(t.entries.len(), 10);
            assert!(t.entries.iter().all(|e| e.detection == t.track_id as usize));
        }
    }

    #[test]
    fn gap_shorter_than_limit_is_bridged() {
        let mut tr = Tracker::new(TrackerConfig::default()).unwrap();
        let d = [b(0.0, 0.0, 10.0, 10.0)];
        tr.step(0, &d).unwrap();
        for f in 1..5 {
            tr.step(f, &[]).unwrap();
        }
        let a = tr.step(5, &d).unwrap();
        assert_eq!(a.matched, vec![(0, 0)]);
        assert_eq!(tr.finish().len(), 1);
    }

    #[test]
    fn fifth_consecutive_miss_terminates() {
        let mut tr = Tracker::new(TrackerConfig::default()).unwrap();
        let d = [b(0.0, 0.0, 10.0, 10.0)];
        tr.step(0, &d).unwrap();
        for f in 1..5 {
            assert!(tr.step(f, &[]).unwrap().terminated.is_empty());
        }
        assert_eq!(tr.step(5, &[]).unwrap().terminated, vec![0]);
        let a = tr.step(6, &d).unwrap();
        assert_eq!(a.started, vec![1]);
        let tracks = tr.finish();
        assert_eq!(tracks.len(), 2);
        assert_eq!(tracks[0].last_frame(), 0);
        assert_eq!(tracks[1].first_frame(), 6);
    }

    #[test]
    fn below_threshold_starts_new_track() {
        let mut tr = Tracker::new(TrackerConfig::default()).unwrap();
        tr.step(0, &[b(0.0, 0.0, 10.0, 10.0)]).unwrap();
        // IoU 1/19 < 0.1
        let a = tr.step(1, &[b(9.0, 0.0, 19.0, 10.0)]).unwrap();
        assert!(a.matched.is_empty());
        assert_eq!(a.started, vec![1]);
    }

    #[test]
    fn tie_goes_to_lower_track_id() {
        let mut tr = Tracker::new(TrackerConfig::default()).unwrap();
        tr.step(0, &[b(0.0, 0.0, 10.0, 10.0), b(10.0, 0.0, 20.0, 10.0)]).unwrap();
        // one detection overlapping both tracks equally
        let a = tr.step(1, &[b(5.0, 0.0, 15.0, 10.0)]).unwrap();
        assert_eq!(a.matched, vec![(0, 0)]);
    }

    #[test]
    fn frames_must_increase() {
        let mut tr = Tracker::new(TrackerConfig::default()).unwrap();
        tr.step(3, &[]).unwrap();
        assert!(tr.step(3, &[]).is_err());
    }

    fn arb_boxes() -> impl Strategy<Value = Vec<BBox>> {
        proptest::collection::vec((0.0..200.0f64, 0.0..200.0f64, 5.0..60.0f64, 5.0..60.0f64), 0..6)
            .prop_map(|v| v.into_iter().map(|(x, y, w, h)| b(x, y, x + w, y + h)).collect())
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_boxes(), c in arb_boxes()) {
            for p in &a {
                for q in &c {
                    let v = iou(p, q);
                    prop_assert!((0.0..=1.0).contains(&v));
                    prop_assert_eq!(v, iou(q, p));
                }
                prop_assert!((iou(p, p) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn matching_ignores_detection_order(prev in arb_boxes(), cur in arb_boxes(), rot in 0usize..6) {
            let mut t1 = Tracker::new(TrackerConfig::default()).unwrap();
            t1.step(0, &prev).unwrap();
            let mut t2 = t1.clone();
            let mut shuffled = cur.clone();
            if !shuffled.is_empty() {
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
            }
            let a = t1.step(1, &cur).unwrap();
            let c = t2.step(1, &shuffled).unwrap();
            let mut ma: Vec<(u64, [u64; 4])> = a.matched.iter().map(|&(t, d)| (t, key(&cur[d]))).collect();
            let mut mc: Vec<(u64, [u64; 4])> = c.matched.iter().map(|&(t, d)| (t, key(&shuffled[d]))).collect();
            ma.sort();
            mc.sort();
            prop_assert_eq!(ma, mc);
        }

        #[test]
        fn every_detection_is_assigned_once(frames in proptest::collection::vec(arb_boxes(), 1..8)) {
            let tracks = track_all(frames.iter().enumerate().map(|(i, d)| (i as i64, d.as_slice())), TrackerConfig::default()).unwrap();
            let mut seen = std::collections::HashSet::new();
            for t in &tracks {
                for w in t.entries.windows(2) {
                    prop_assert!(w[0].frame_index < w[1].frame_index);
                }
                for e in &t.entries {
                    prop_assert!(seen.insert((e.frame_index, e.detection)));
                }
            }
            prop_assert_eq!(seen.len(), frames.iter().map(Vec::len).sum::<usize>());
        }
    }

    fn key(b: &BBox) -> [u64; 4] {
        [b.x0.to_bits(), b.y0.to_bits(), b.x1.to_bits(), b.y1.to_bits()]
    }
}
