//! On-disk formats: CSV tables for detections, ground truth and tracks, and
//! JSON documents for observations and fits.
//!
//! ```text
//! keypoints.csv     frame,bird_id,keypoint_id,x,y,confidence
//! masks.csv         frame,bird_id,width,height,runs
//! ground_truth.csv  frame,bird_id,keypoint_id,x,y,visible
//! tracks.csv        track_id,frame,bird_id,x0,y0,x1,y1
//! ```
//!
//! Mask `runs` are space-separated run lengths in row-major order, starting
//! with a run of zeros.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::losses::{Keypoint, ObservationFrame};
use crate::metrics::GtKeypoint;
use crate::tracker::Track;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeypointRow {
    pub frame: i64,
    pub bird_id: u64,
    pub keypoint_id: usize,
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRow {
    pub frame: i64,
    pub bird_id: u64,
    pub width: usize,
    pub height: usize,
    pub runs: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRow {
    pub frame: i64,
    pub bird_id: u64,
    pub keypoint_id: usize,
    pub x: f64,
    pub y: f64,
    pub visible: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub track_id: u64,
    pub frame: i64,
    pub bird_id: u64,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl TrackRow {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.x0, self.y0, self.x1, self.y1)
    }
}

/// One detected bird in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bird_id: u64,
    pub keypoints: Vec<Keypoint>,
    pub mask: Mask,
    /// Tight box of the mask, or of the confident keypoints when the mask
    /// is empty.
    pub bbox: BBox,
}

/// Detections of a whole video, keyed by frame and ordered by bird id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Detections {
    pub image_size: (usize, usize),
    pub frames: BTreeMap<i64, Vec<Detection>>,
}

/// Ground truth keyed by bird id, then frame.
pub type GroundTruth = BTreeMap<u64, BTreeMap<i64, Vec<GtKeypoint>>>;

fn read_rows<T: DeserializeOwned, R: Read>(reader: R) -> Result<Vec<T>> {
    csv::Reader::from_reader(reader).deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn write_rows<T: Serialize, W: Write>(writer: W, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn parse_runs(text: &str) -> Result<Vec<usize>> {
    text.split_whitespace().map(|t| t.parse().map_err(|_| Error::Format(format!("bad run length `{t}`")))).collect()
}

fn format_runs(runs: &[usize]) -> String {
    runs.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// Groups keypoint rows by `(frame, bird_id)`. Keypoint ids must cover
/// `0..K` exactly once per detection, with the same `K` everywhere.
pub fn group_keypoints(rows: &[KeypointRow]) -> Result<BTreeMap<(i64, u64), Vec<Keypoint>>> {
    let mut grouped: BTreeMap<(i64, u64), BTreeMap<usize, Keypoint>> = BTreeMap::new();
    for r in rows {
        let slot = grouped.entry((r.frame, r.bird_id)).or_default();
        if slot.insert(r.keypoint_id, Keypoint::new(r.x, r.y, r.confidence)).is_some() {
            return Err(Error::Format(format!("keypoint {} of bird {} in frame {} appears twice", r.keypoint_id, r.bird_id, r.frame)));
        }
    }
    let mut count = None;
    grouped
        .into_iter()
        .map(|(key, kps)| {
            let k = *count.get_or_insert(kps.len());
            if kps.len() != k || kps.keys().enumerate().any(|(i, &id)| i != id) {
                return Err(Error::Format(format!("bird {} in frame {} does not have keypoints 0..{k}", key.1, key.0)));
            }
            Ok((key, kps.into_values().collect()))
        })
        .collect()
}

fn detection_bbox(mask: &Mask, keypoints: &[Keypoint]) -> Option<BBox> {
    mask.tight_bbox().or_else(|| {
        let confident: Vec<_> = keypoints.iter().filter(|k| k.confidence > 0.0).collect();
        let x0 = confident.iter().map(|k| k.x).fold(f64::INFINITY, f64::min);
        let y0 = confident.iter().map(|k| k.y).fold(f64::INFINITY, f64::min);
        let x1 = confident.iter().map(|k| k.x).fold(f64::NEG_INFINITY, f64::max);
        let y1 = confident.iter().map(|k| k.y).fold(f64::NEG_INFINITY, f64::max);
        let b = BBox::new(x0, y0, x1.max(x0 + 1.0), y1.max(y0 + 1.0));
        b.is_well_formed().then_some(b)
    })
}

/// Joins keypoint and mask tables. Every detection needs both; all masks
/// must share one size. Detections with neither a mask nor a confident
/// keypoint are dropped.
pub fn read_detections<R1: Read, R2: Read>(keypoints: R1, masks: R2) -> Result<Detections> {
    let kp_rows: Vec<KeypointRow> = read_rows(keypoints)?;
    let mask_rows: Vec<MaskRow> = read_rows(masks)?;
    let mut kps = group_keypoints(&kp_rows)?;
    let mut out = Detections::default();
    let mut size = None;
    for m in mask_rows {
        let s = *size.get_or_insert((m.width, m.height));
        if s != (m.width, m.height) {
            return Err(Error::Format(format!("mask of bird {} in frame {} is {}x{}, expected {}x{}", m.bird_id, m.frame, m.width, m.height, s.0, s.1)));
        }
        let mask = Mask::from_rle(m.width, m.height, &parse_runs(&m.runs)?)?;
        let keypoints =
            kps.remove(&(m.frame, m.bird_id)).ok_or_else(|| Error::Format(format!("bird {} in frame {} has a mask but no keypoints", m.bird_id, m.frame)))?;
        let Some(bbox) = detection_bbox(&mask, &keypoints) else { continue };
        out.frames.entry(m.frame).or_default().push(Detection { bird_id: m.bird_id, keypoints, mask, bbox });
    }
    if let Some(((frame, bird), _)) = kps.into_iter().next() {
        return Err(Error::Format(format!("bird {bird} in frame {frame} has keypoints but no mask")));
    }
    for dets in out.frames.values_mut() {
        dets.sort_by_key(|d| d.bird_id);
        if dets.windows(2).any(|w| w[0].bird_id == w[1].bird_id) {
            return Err(Error::Format("duplicate mask rows".into()));
        }
    }
    out.image_size = size.unwrap_or((0, 0));
    Ok(out)
}

pub fn write_detections<W1: Write, W2: Write>(detections: &Detections, keypoints: W1, masks: W2) -> Result<()> {
    let iter = || detections.frames.iter().flat_map(|(&f, ds)| ds.iter().map(move |d| (f, d)));
    write_rows(
        keypoints,
        iter().flat_map(|(frame, d)| {
            d.keypoints.iter().enumerate().map(move |(k, kp)| KeypointRow {
                frame,
                bird_id: d.bird_id,
                keypoint_id: k,
                x: kp.x,
                y: kp.y,
                confidence: kp.confidence,
            })
        }),
    )?;
    write_rows(
        masks,
        iter().map(|(frame, d)| MaskRow { frame, bird_id: d.bird_id, width: d.mask.width(), height: d.mask.height(), runs: format_runs(&d.mask.to_rle()) }),
    )
}

pub fn read_ground_truth<R: Read>(reader: R) -> Result<GroundTruth> {
    let rows: Vec<GroundTruthRow> = read_rows(reader)?;
    let mut grouped: BTreeMap<(u64, i64), BTreeMap<usize, GtKeypoint>> = BTreeMap::new();
    for r in rows {
        grouped.entry((r.bird_id, r.frame)).or_default().insert(r.keypoint_id, GtKeypoint::new(r.x, r.y, r.visible != 0));
    }
    let mut out = GroundTruth::new();
    for ((bird, frame), kps) in grouped {
        if kps.keys().enumerate().any(|(i, &id)| i != id) {
            return Err(Error::Format(format!("ground truth for bird {bird} in frame {frame} has gaps in keypoint ids")));
        }
        out.entry(bird).or_default().insert(frame, kps.into_values().collect());
    }
    Ok(out)
}

pub fn write_ground_truth<W: Write>(gt: &GroundTruth, writer: W) -> Result<()> {
    let mut rows = Vec::new();
    for (&bird, frames) in gt {
        for (&frame, kps) in frames {
            for (k, g) in kps.iter().enumerate() {
                rows.push(GroundTruthRow { frame, bird_id: bird, keypoint_id: k, x: g.x, y: g.y, visible: u8::from(g.visible) });
            }
        }
    }
    rows.sort_by_key(|r| (r.frame, r.bird_id, r.keypoint_id));
    write_rows(writer, rows)
}

/// Track rows keyed by track id, each sorted by frame.
pub fn read_tracks<R: Read>(reader: R) -> Result<BTreeMap<u64, Vec<TrackRow>>> {
    let rows: Vec<TrackRow> = read_rows(reader)?;
    let mut out: BTreeMap<u64, Vec<TrackRow>> = BTreeMap::new();
    for r in rows {
        out.entry(r.track_id).or_default().push(r);
    }
    for rows in out.values_mut() {
        rows.sort_by_key(|r| r.frame);
        if rows.windows(2).any(|w| w[0].frame == w[1].frame) {
            return Err(Error::Format(format!("track {} has two rows for one frame", rows[0].track_id)));
        }
    }
    Ok(out)
}

/// Writes tracks produced from `detections`, resolving each entry's bird id.
pub fn write_tracks<W: Write>(tracks: &[Track], detections: &Detections, writer: W) -> Result<()> {
    let mut rows = Vec::new();
    for t in tracks {
        for e in &t.entries {
            let d = detections
                .frames
                .get(&e.frame_index)
                .and_then(|ds| ds.get(e.detection))
                .ok_or_else(|| Error::Format(format!("track {} refers to an unknown detection", t.track_id)))?;
            rows.push(TrackRow { track_id: t.track_id, frame: e.frame_index, bird_id: d.bird_id, x0: e.bbox.x0, y0: e.bbox.y0, x1: e.bbox.x1, y1: e.bbox.y1 });
        }
    }
    write_rows(writer, rows)
}

/// Crop-space observations of one track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationsFile {
    pub version: u32,
    pub track_id: u64,
    pub image_size: (usize, usize),
    /// Detected bird id per frame; `None` in gaps.
    pub bird_ids: Vec<Option<u64>>,
    pub frames: Vec<ObservationFrame>,
}

impl ObservationsFile {
    pub fn check_version(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported observations version {}", self.version)));
        }
        Error::check_len("bird_ids", self.frames.len(), self.bird_ids.len())
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}
