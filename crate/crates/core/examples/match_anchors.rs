//! Generates the anchor grid for one image, matches a few faces to it and
//! shows what each face gets assigned.
//!
//! ```text
//! cargo run --example match_anchors
//! ```

use efficientface::anchors::{generate_anchors, match_anchors, AnchorConfig, AnchorLabel};
use efficientface::boxes::{decode, BBox};

fn main() -> efficientface::Result<()> {
    let cfg = AnchorConfig::default();
    let anchors = generate_anchors(256, 256, &cfg)?;
    println!("{} anchors", anchors.len());
    for l in 2..=7 {
        let g = anchors.level(l).expect("level exists");
        println!("  P{l}: {:5} anchors of size {}", g.len(), g.size);
    }

    let faces = vec![
        BBox::from_xywh(20.0, 30.0, 14.0, 18.0)?,
        BBox::from_xywh(100.0, 60.0, 60.0, 70.0)?,
        BBox::from_xywh(10.0, 150.0, 200.0, 90.0)?,
    ];
    let m = match_anchors(&anchors, &faces, cfg.t_pos, cfg.t_neg)?;
    println!(
        "\n{} positive, {} ignored, {} negative",
        m.count(AnchorLabel::Positive),
        m.count(AnchorLabel::Ignore),
        m.count(AnchorLabel::Negative)
    );
    for (j, face) in faces.iter().enumerate() {
        println!("\nface {j}: {face:?}");
        for a in (0..anchors.len()).filter(|&a| m.target[a] == Some(j)) {
            let anchor = anchors.boxes[a];
            let back = decode(&anchor, &m.deltas[a]);
            println!(
                "  anchor {a:5} side {:3}  IoU {:.3}{}  deltas {:?}  decoded x1 {:.2}",
                anchor.width(),
                anchor.iou(face),
                if m.forced[a] { " (forced)" } else { "" },
                m.deltas[a].map(|d| (d * 1000.0).round() / 1000.0),
                back.x1
            );
        }
    }
    Ok(())
}
