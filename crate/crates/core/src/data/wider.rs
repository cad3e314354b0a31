//! WIDER-style `bbx_gt` annotation files and detection output files.
//!
//! Annotation blocks are a path line, a face count line, then one row per
//! face: `x y w h blur expression illumination invalid occlusion pose`.
//! Detection files hold an image name, a count, then `x y w h score` rows.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::boxes::{BBox, BoxList, Detections};
use crate::error::{Error, Result};

/// Per-face attribute columns of the annotation format.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FaceAttrs {
    pub blur: u8,
    pub expression: u8,
    pub illumination: u8,
    pub invalid: u8,
    pub occlusion: u8,
    pub pose: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub path: String,
    pub gt: BoxList,
    /// One entry per box in `gt`.
    pub attrs: Vec<FaceAttrs>,
    /// Set when rows had to be dropped while parsing.
    pub flagged: bool,
}

impl ImageRecord {
    pub fn new(path: impl Into<String>, boxes: Vec<BBox>) -> Result<Self> {
        let attrs = vec![FaceAttrs::default(); boxes.len()];
        Ok(Self {
            path: path.into(),
            gt: BoxList::new(boxes)?,
            attrs,
            flagged: false,
        })
    }

    /// Boxes not marked invalid; these are the training and evaluation
    /// targets.
    pub fn valid_boxes(&self) -> Vec<BBox> {
        self.gt
            .boxes
            .iter()
            .zip(&self.attrs)
            .filter(|(_, a)| a.invalid == 0)
            .map(|(b, _)| *b)
            .collect()
    }

    /// File name without directories.
    pub fn name(&self) -> &str {
        self.path.rsplit(['/', '\\']).next().unwrap_or(&self.path)
    }
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            inner: text.lines().enumerate().peekable(),
            last: 0,
        }
    }

    /// Next non-blank line with its 1-based number.
    fn next(&mut self) -> Option<(usize, &'a str)> {
        for (i, l) in self.inner.by_ref() {
            self.last = i + 1;
            if !l.trim().is_empty() {
                return Some((i + 1, l.trim()));
            }
        }
        None
    }

    fn expect(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.next().ok_or_else(|| Error::Parse {
            line: self.last + 1,
            message: format!("unexpected end of file, expected {what}"),
        })
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {what} `{s}`"),
    })
}

pub fn parse_wider_annotations(text: &str) -> Result<Vec<ImageRecord>> {
    let mut lines = Lines::new(text);
    let mut out = Vec::new();
    while let Some((_, path)) = lines.next() {
        let (cl, count) = lines.expect("a face count")?;
        let count: usize = parse_num(cl, count, "face count")?;
        let mut boxes = Vec::with_capacity(count);
        let mut attrs = Vec::with_capacity(count);
        let mut flagged = false;
        // Images without faces still carry one all-zero placeholder row in
        // the published files; accept it when present.
        if count == 0 {
            if let Some((_, l)) = lines.inner.peek() {
                let fields: Vec<&str> = l.split_whitespace().collect();
                if fields.len() == 10 && fields.iter().all(|f| f.parse::<f64>().is_ok()) {
                    lines.next();
                }
            }
        }
        for _ in 0..count {
            let (ln, row) = lines.expect("a face row")?;
            let fields: Vec<&str> = row.split_whitespace().collect();
            if fields.len() < 4 {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("face row has {} fields, expected 10", fields.len()),
                });
            }
            if fields.len() != 10 && fields.len() != 4 {
                return Err(Error::Parse {
                    line: ln,
                    message: format!("face row has {} fields, expected 10", fields.len()),
                });
            }
            let x: f64 = parse_num(ln, fields[0], "x")?;
            let y: f64 = parse_num(ln, fields[1], "y")?;
            let w: f64 = parse_num(ln, fields[2], "width")?;
            let h: f64 = parse_num(ln, fields[3], "height")?;
            let mut a = [0u8; 6];
            for (k, f) in fields.iter().skip(4).enumerate() {
                a[k] = parse_num(ln, f, "attribute")?;
            }
            if !(w > 0.0 && h > 0.0) {
                log::warn!("line {ln}: dropping face with size {w}x{h} in {path}");
                flagged = true;
                continue;
            }
            boxes.push(BBox::from_xywh(x, y, w, h).map_err(|e| Error::Parse {
                line: ln,
                message: e.to_string(),
            })?);
            attrs.push(FaceAttrs {
                blur: a[0],
                expression: a[1],
                illumination: a[2],
                invalid: a[3],
                occlusion: a[4],
                pose: a[5],
            });
        }
        if let Some((ln, next)) = lines.inner.peek() {
            // A numeric row right after the block means the count was short.
            let looks_like_row =
                next.split_whitespace().count() >= 4 && next.split_whitespace().all(|f| f.parse::<f64>().is_ok());
            if looks_like_row {
                return Err(Error::Parse {
                    line: ln + 1,
                    message: format!("more face rows than the count of {count} for {path}"),
                });
            }
        }
        out.push(ImageRecord {
            path: path.to_string(),
            gt: BoxList::new(boxes)?,
            attrs,
            flagged,
        });
    }
    Ok(out)
}

pub fn format_wider_annotations(records: &[ImageRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let _ = writeln!(s, "{}", r.path);
        let _ = writeln!(s, "{}", r.gt.len());
        for (b, a) in r.gt.boxes.iter().zip(&r.attrs) {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {} {} {}",
                b.x1,
                b.y1,
                b.width(),
                b.height(),
                a.blur,
                a.expression,
                a.illumination,
                a.invalid,
                a.occlusion,
                a.pose
            );
        }
    }
    s
}

pub fn format_detections(name: &str, dets: &Detections) -> String {
    let mut s = format!("{name}\n{}\n", dets.len());
    for (i, b) in dets.boxes.iter().enumerate() {
        let score = dets.score(i).unwrap_or(1.0);
        let _ = writeln!(
            s,
            "{:.6} {:.6} {:.6} {:.6} {:.6}",
            b.x1,
            b.y1,
            b.width(),
            b.height(),
            score
        );
    }
    s
}

/// Reads one detection file back into `(name, detections)`.
pub fn parse_detections(text: &str) -> Result<(String, Detections)> {
    let mut lines = Lines::new(text);
    let (_, name) = lines.expect("an image name")?;
    let (cl, count) = lines.expect("a detection count")?;
    let count: usize = parse_num(cl, count, "detection count")?;
    let mut boxes = Vec::with_capacity(count);
    let mut scores = Vec::with_capacity(count);
    for _ in 0..count {
        let (ln, row) = lines.expect("a detection row")?;
        let f: Vec<f64> = row
            .split_whitespace()
            .map(|v| parse_num(ln, v, "value"))
            .collect::<Result<_>>()?;
        if f.len() != 5 {
            return Err(Error::Parse {
                line: ln,
                message: format!("detection row has {} fields, expected 5", f.len()),
            });
        }
        boxes.push(BBox::from_xywh(f[0], f[1], f[2], f[3]).map_err(|e| Error::Parse {
            line: ln,
            message: e.to_string(),
        })?);
        scores.push(f[4]);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::Parse {
            line: ln,
            message: format!("trailing content after {count} detections"),
        });
    }
    Ok((name.to_string(), BoxList::with_scores(boxes, scores)?))
}

/// Writes one `<stem>.txt` per record into `out_dir`; returns the paths.
pub fn write_detections(records: &[ImageRecord], detections: &[Detections], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if records.len() != detections.len() {
        return Err(Error::Structure(format!(
            "{} records but {} detection lists",
            records.len(),
            detections.len()
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::with_capacity(records.len());
    for (r, d) in records.iter().zip(detections) {
        let name = r.name();
        let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
        let path = out_dir.join(format!("{stem}.txt"));
        std::fs::write(&path, format_detections(name, d))?;
        paths.push(path);
    }
    Ok(paths)
}
