//! Proposal ingestion/generation and click-guided proposal selection.
//!
//! Selection keeps, per click: proposals that contain the click, ranked by
//! center-to-click distance, greedily de-duplicated so no two kept proposals
//! overlap above `t_iou`, truncated to the best `top_n`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{center_distance, contains, iou, BoundingBox, Click};

/// Where a proposal came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalSource {
    Ingested,
    SlidingWindow,
}

/// Candidate object bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub image_id: String,
    pub source: ProposalSource,
}

/// Selection hyper-parameters; defaults are dedup threshold 0.7 and 8 kept
/// proposals per click.
#[derive(Debug, Clone, Copy)]
pub struct SelectionConfig {
    pub t_iou: f64,
    pub top_n: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            t_iou: 0.7,
            top_n: 8,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_iou > 0.0 && self.t_iou <= 1.0) {
            return Err(Error::Config(format!(
                "t_iou must be in (0, 1], got {}",
                self.t_iou
            )));
        }
        if self.top_n == 0 {
            return Err(Error::Config("top_n must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic multi-scale sliding-window grid, the fallback when no
/// proposal file is ingested. `scales` are window sides as fractions of the
/// shorter image side; aspect ratio r yields a window of shape
/// (side*sqrt(r)) x (side/sqrt(r)). Windows are clipped to the image and
/// exact duplicates removed, preserving first-occurrence order.
pub fn generate_sliding_windows(
    width: usize,
    height: usize,
    scales: &[f64],
    aspect_ratios: &[f64],
    stride_fraction: f64,
    image_id: &str,
) -> Result<Vec<Proposal>> {
    if scales.is_empty() || aspect_ratios.is_empty() {
        return Err(Error::Config(
            "scales and aspect_ratios must be non-empty".into(),
        ));
    }
    if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "stride_fraction must be in (0, 1], got {stride_fraction}"
        )));
    }
    let (wf, hf) = (width as f64, height as f64);
    let short = wf.min(hf);
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for &scale in scales {
        if scale <= 0.0 {
            return Err(Error::Config(format!("scale must be positive: {scale}")));
        }
        for &ratio in aspect_ratios {
            if ratio <= 0.0 {
                return Err(Error::Config(format!("aspect ratio must be positive: {ratio}")));
            }
            let side = scale * short;
            let win_w = (side * ratio.sqrt()).min(wf);
            let win_h = (side / ratio.sqrt()).min(hf);
            if win_w < 1.0 || win_h < 1.0 {
                continue;
            }
            let xs = grid_positions(wf, win_w, stride_fraction * win_w);
            let ys = grid_positions(hf, win_h, stride_fraction * win_h);
            for &y in &ys {
                for &x in &xs {
                    let bbox = clipped_window(x, y, win_w, win_h, wf, hf);
                    let key = (
                        bbox.x1.to_bits(),
                        bbox.y1.to_bits(),
                        bbox.x2.to_bits(),
                        bbox.y2.to_bits(),
                    );
                    if seen.insert(key) {
                        out.push(Proposal {
                            bbox,
                            image_id: image_id.to_string(),
                            source: ProposalSource::SlidingWindow,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Grid offsets 0, stride, 2*stride, ... while the window fits, plus a final
/// flush-to-edge position when the grid does not land exactly on it.
fn grid_positions(extent: f64, window: f64, stride: f64) -> Vec<f64> {
    let mut xs = Vec::new();
    let mut x = 0.0;
    // tiny epsilon so accumulated float error does not drop the last column
    while x + window <= extent + 1e-9 {
        xs.push(x);
        x += stride;
    }
    let flush = extent - window;
    if flush > 0.0 && xs.last().map_or(true, |&last| (last - flush).abs() > 1e-9) {
        xs.push(flush);
    }
    if xs.is_empty() {
        xs.push(0.0);
    }
    xs
}

fn clipped_window(x: f64, y: f64, w: f64, h: f64, img_w: f64, img_h: f64) -> BoundingBox {
    let x1 = x.max(0.0);
    let y1 = y.max(0.0);
    let x2 = (x + w).min(img_w);
    let y2 = (y + h).min(img_h);
    BoundingBox::new(x1, y1, x2, y2).expect("sliding window construction is in-bounds")
}

/// Click-guided selection: containment filter, distance ranking, greedy IoU
/// de-duplication (a proposal survives only if its IoU with every
/// already-kept proposal is <= t_iou), then truncation to `top_n`.
/// Distance ties are broken by input order. Returns an empty list when no
/// proposal contains the click.
pub fn select_for_click(
    proposals: &[Proposal],
    click: &Click,
    cfg: &SelectionConfig,
) -> Vec<Proposal> {
    debug_assert!(proposals.iter().all(|p| p.image_id == click.image_id));
    let mut candidates: Vec<&Proposal> = proposals
        .iter()
        .filter(|p| contains(&p.bbox, click))
        .collect();
    candidates.sort_by(|a, b| {
        center_distance(&a.bbox, click)
            .partial_cmp(&center_distance(&b.bbox, click))
            .expect("distances are finite")
    });
    let mut kept: Vec<Proposal> = Vec::new();
    for cand in candidates {
        if kept.len() >= cfg.top_n {
            break;
        }
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= cfg.t_iou) {
            kept.push(cand.clone());
        }
    }
    kept
}

const PROPOSALS_HEADER: &str = "image_id,x1,y1,x2,y2";
const CLICKS_HEADER: &str = "image_id,class_id,x,y";

/// Loads a proposals CSV (`image_id,x1,y1,x2,y2`). Malformed rows are
/// reported with their line number.
pub fn load_proposals(path: &Path) -> Result<Vec<Proposal>> {
    let mut reader = open_csv(path, PROPOSALS_HEADER)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let line = record.position().map_or(0, |p| p.line()) as usize;
        if record.len() != 5 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 5 fields, got {}", record.len()),
            ));
        }
        let coord = |i: usize| parse_f64(&record, i, path, line);
        let bbox = BoundingBox::new(coord(1)?, coord(2)?, coord(3)?, coord(4)?)
            .map_err(|e| Error::parse(path, line, e.to_string()))?;
        out.push(Proposal {
            bbox,
            image_id: record[0].to_string(),
            source: ProposalSource::Ingested,
        });
    }
    Ok(out)
}

/// Writes proposals as CSV with coordinates at 2 decimals.
pub fn save_proposals(path: &Path, proposals: &[Proposal]) -> Result<()> {
    let mut writer = create_csv(path, PROPOSALS_HEADER)?;
    for p in proposals {
        writer
            .write_record([
                p.image_id.as_str(),
                &format!("{:.2}", p.bbox.x1),
                &format!("{:.2}", p.bbox.y1),
                &format!("{:.2}", p.bbox.x2),
                &format!("{:.2}", p.bbox.y2),
            ])
            .map_err(|e| csv_error(path, &e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Loads a clicks CSV (`image_id,class_id,x,y`).
pub fn load_clicks(path: &Path) -> Result<Vec<Click>> {
    let mut reader = open_csv(path, CLICKS_HEADER)?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let line = record.position().map_or(0, |p| p.line()) as usize;
        if record.len() != 4 {
            return Err(Error::parse(
                path,
                line,
                format!("expected 4 fields, got {}", record.len()),
            ));
        }
        let class_id: usize = record[1]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad class_id '{}'", &record[1])))?;
        let x = parse_f64(&record, 2, path, line)?;
        let y = parse_f64(&record, 3, path, line)?;
        if !(x.is_finite() && y.is_finite()) || x < 0.0 || y < 0.0 {
            return Err(Error::parse(path, line, "click coordinates out of range"));
        }
        out.push(Click {
            x,
            y,
            class_id,
            image_id: record[0].to_string(),
        });
    }
    Ok(out)
}

/// Writes clicks as CSV with coordinates at 2 decimals.
pub fn save_clicks(path: &Path, clicks: &[Click]) -> Result<()> {
    let mut writer = create_csv(path, CLICKS_HEADER)?;
    for c in clicks {
        writer
            .write_record([
                c.image_id.as_str(),
                &c.class_id.to_string(),
                &format!("{:.2}", c.x),
                &format!("{:.2}", c.y),
            ])
            .map_err(|e| csv_error(path, &e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn open_csv(path: &Path, expected_header: &str) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader.headers().map_err(|e| csv_error(path, &e))?;
    let got = header.iter().collect::<Vec<_>>().join(",");
    if got != expected_header {
        return Err(Error::parse(
            path,
            1,
            format!("expected header '{expected_header}', got '{got}'"),
        ));
    }
    Ok(reader)
}

pub(crate) fn create_csv(path: &Path, header: &str) -> Result<csv::Writer<std::fs::File>> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer
        .write_record(header.split(','))
        .map_err(|e| csv_error(path, &e))?;
    Ok(writer)
}

pub(crate) fn csv_error(path: &Path, e: &csv::Error) -> Error {
    Error::parse(path, 0, e.to_string())
}

pub(crate) fn parse_f64(
    record: &csv::StringRecord,
    i: usize,
    path: &Path,
    line: usize,
) -> Result<f64> {
    record[i]
        .parse::<f64>()
        .map_err(|_| Error::parse(path, line, format!("bad number '{}'", &record[i])))
}
