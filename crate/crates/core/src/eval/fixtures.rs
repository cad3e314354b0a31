//! Small hand-built AP cases used by the command line and the tests.

use crate::boxes::{BBox, BoxList, Detections};

pub struct ApFixture {
    pub name: &'static str,
    pub dets: Vec<Detections>,
    pub gts: Vec<Vec<BBox>>,
}

fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
    BBox::new(x1, y1, x2, y2).expect("fixture boxes are valid")
}

fn scored(boxes: Vec<BBox>, scores: Vec<f64>) -> Detections {
    BoxList::with_scores(boxes, scores).expect("fixture detections are valid")
}

/// One hit at IoU 0.6; a miss ranked above a hit; and a two-image mix of
/// hits, duplicates and misses.
pub fn ap_fixtures() -> Vec<ApFixture> {
    vec![
        ApFixture {
            name: "single-hit",
            dets: vec![scored(vec![b(0.0, 0.0, 10.0, 6.0)], vec![0.7])],
            gts: vec![vec![b(0.0, 0.0, 10.0, 10.0)]],
        },
        ApFixture {
            name: "miss-then-hit",
            dets: vec![scored(
                vec![b(50.0, 50.0, 60.0, 60.0), b(0.0, 0.0, 10.0, 10.0)],
                vec![0.9, 0.8],
            )],
            gts: vec![vec![b(0.0, 0.0, 10.0, 10.0)]],
        },
        ApFixture {
            name: "mixed",
            dets: vec![
                scored(
                    vec![
                        b(0.0, 0.0, 10.0, 10.0),
                        b(1.0, 1.0, 11.0, 11.0),
                        b(40.0, 40.0, 52.0, 50.0),
                        b(80.0, 0.0, 90.0, 10.0),
                    ],
                    vec![0.95, 0.9, 0.6, 0.3],
                ),
                scored(
                    vec![b(20.0, 20.0, 35.0, 35.0), b(60.0, 60.0, 70.0, 70.0)],
                    vec![0.85, 0.5],
                ),
            ],
            gts: vec![
                vec![
                    b(0.0, 0.0, 10.0, 10.0),
                    b(40.0, 40.0, 50.0, 50.0),
                    b(100.0, 100.0, 110.0, 110.0),
                ],
                vec![b(20.0, 20.0, 34.0, 36.0), b(61.0, 59.0, 70.0, 71.0)],
            ],
        },
    ]
}
