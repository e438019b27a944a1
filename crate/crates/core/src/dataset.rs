//! Dataset container format.
//!
//! ```text
//! magic   b"PPAR"
//! version u32           (currently 1)
//! count   u64           number of clips
//! repeat count times:
//!   record_len u64
//!   record bytes:
//!     meta_len u64, metadata text (key = value lines)
//!     frame_count u64, frames as little-endian f32
//! crc32   u32           over every preceding byte
//! ```
//!
//! Clip metadata keys: `id`, `seed`, `n`, `t`, `height`, `width`,
//! `labels.individual.<i>`, `partition.<g>`, `labels.social.<g>`,
//! `labels.global`, `box.<i>.<t>` (x1,y1,x2,y2 as exact decimal floats).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::featmap::BoxTrack;
use crate::grouping::{Partition, RelationMatrix};
use crate::heads::LabelSet;
use crate::io_util::{crc32, Cursor};
use crate::kv::{fmt_f64, KvDoc};
use crate::synth::ClipSample;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"PPAR";
const VERSION: u32 = 1;

fn label_list(set: &LabelSet) -> String {
    set.iter()
        .map(|l| l.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn clip_metadata(clip: &ClipSample) -> String {
    let mut doc = KvDoc::new();
    let shape = clip.frames.shape();
    doc.set("id", clip.id);
    doc.set("seed", clip.seed);
    doc.set("n", clip.member_count());
    doc.set("t", shape[0]);
    doc.set("height", shape[2]);
    doc.set("width", shape[3]);
    for (i, set) in clip.individual_labels.iter().enumerate() {
        doc.set(&format!("labels.individual.{i}"), label_list(set));
    }
    for (gi, group) in clip.partition.groups().iter().enumerate() {
        doc.set(
            &format!("partition.{gi}"),
            group
                .iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        doc.set(&format!("labels.social.{gi}"), label_list(&clip.social_labels[gi]));
    }
    doc.set("labels.global", label_list(&clip.global_labels));
    for track in &clip.boxes {
        for (t, b) in track.boxes.iter().enumerate() {
            doc.set(
                &format!("box.{}.{}", track.id, t),
                format!(
                    "{},{},{},{}",
                    fmt_f64(b[0]),
                    fmt_f64(b[1]),
                    fmt_f64(b[2]),
                    fmt_f64(b[3])
                ),
            );
        }
    }
    doc.render()
}

fn encode_clip(clip: &ClipSample) -> Vec<u8> {
    let meta = clip_metadata(clip);
    let mut record = Vec::new();
    record.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    record.extend_from_slice(meta.as_bytes());
    record.extend_from_slice(&(clip.frames.numel() as u64).to_le_bytes());
    for &v in clip.frames.data() {
        record.extend_from_slice(&(v as f32).to_le_bytes());
    }
    record
}

fn decode_clip(record: &[u8]) -> Result<ClipSample> {
    let mut cur = Cursor::new(record);
    let meta_len = cur.u64()? as usize;
    let meta = std::str::from_utf8(cur.take(meta_len)?)
        .map_err(|_| Error::InvalidInput("metadata is not utf-8".into()))?;
    let doc = KvDoc::parse(meta)?;

    let id = doc
        .get_u64("id")?
        .ok_or_else(|| Error::MissingKey("id".into()))?;
    let seed = doc
        .get_u64("seed")?
        .ok_or_else(|| Error::MissingKey("seed".into()))?;
    let n = doc
        .get_usize("n")?
        .ok_or_else(|| Error::MissingKey("n".into()))?;
    let t = doc
        .get_usize("t")?
        .ok_or_else(|| Error::MissingKey("t".into()))?;
    let height = doc
        .get_usize("height")?
        .ok_or_else(|| Error::MissingKey("height".into()))?;
    let width = doc
        .get_usize("width")?
        .ok_or_else(|| Error::MissingKey("width".into()))?;

    let mut individual_labels = Vec::with_capacity(n);
    for i in 0..n {
        let list: Vec<usize> = doc
            .get_list(&format!("labels.individual.{i}"))?
            .ok_or_else(|| Error::MissingKey(format!("labels.individual.{i}")))?;
        individual_labels.push(list.into_iter().collect());
    }
    let mut groups = Vec::new();
    let mut social_labels: Vec<LabelSet> = Vec::new();
    for gi in 0.. {
        let Some(members) = doc.get_list::<usize>(&format!("partition.{gi}"))? else {
            break;
        };
        groups.push(members);
        let list: Vec<usize> = doc
            .get_list(&format!("labels.social.{gi}"))?
            .ok_or_else(|| Error::MissingKey(format!("labels.social.{gi}")))?;
        social_labels.push(list.into_iter().collect());
    }
    let partition = Partition::new(groups, n)?;
    let global_labels: LabelSet = doc
        .get_list::<usize>("labels.global")?
        .ok_or_else(|| Error::MissingKey("labels.global".into()))?
        .into_iter()
        .collect();

    let mut boxes = Vec::with_capacity(n);
    for i in 0..n {
        let mut track = Vec::with_capacity(t);
        for ti in 0..t {
            let coords: Vec<f64> = doc
                .get_list(&format!("box.{i}.{ti}"))?
                .ok_or_else(|| Error::MissingKey(format!("box.{i}.{ti}")))?;
            if coords.len() != 4 {
                return Err(Error::InvalidInput(format!(
                    "box.{i}.{ti} must have 4 coordinates"
                )));
            }
            track.push([coords[0], coords[1], coords[2], coords[3]]);
        }
        boxes.push(BoxTrack::new(i, track, width, height)?);
    }

    let frame_count = cur.u64()? as usize;
    if frame_count != t * 3 * height * width {
        return Err(Error::InvalidInput(format!(
            "frame count {frame_count} does not match dims {t}x3x{height}x{width}"
        )));
    }
    let mut frames = Vec::with_capacity(frame_count);
    for _ in 0..frame_count {
        frames.push(cur.f32()? as f64);
    }

    let relation = RelationMatrix::from_partition(&partition);
    Ok(ClipSample {
        id,
        seed,
        frames: Tensor::new(vec![t, 3, height, width], frames)?,
        boxes,
        individual_labels,
        partition,
        social_labels,
        global_labels,
        relation,
    })
}

pub fn dataset_to_bytes(clips: &[ClipSample]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(clips.len() as u64).to_le_bytes());
    for clip in clips {
        let record = encode_clip(clip);
        buf.extend_from_slice(&(record.len() as u64).to_le_bytes());
        buf.extend_from_slice(&record);
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Vec<ClipSample>> {
    if bytes.len() < 20 {
        return Err(Error::Truncated {
            needed: 20,
            available: bytes.len(),
        });
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let computed = crc32(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut cur = Cursor::new(body);
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::BadMagic(format!("{:?}", magic)));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = cur.u64()? as usize;
    let mut clips = Vec::with_capacity(count);
    for _ in 0..count {
        let record_len = cur.u64()? as usize;
        let record = cur.take(record_len)?;
        clips.push(decode_clip(record)?);
    }
    Ok(clips)
}

pub fn write_dataset(clips: &[ClipSample], path: &Path) -> Result<()> {
    let bytes = dataset_to_bytes(clips);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<ClipSample>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    dataset_from_bytes(&bytes)
}
