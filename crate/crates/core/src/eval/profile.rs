//! Parameter and multiply-accumulate counts from a shape-only forward pass.
//!
//! Counting rules: a convolution costs `kh*kw*cin*cout*hout*wout` MACs per
//! image (bias excluded) and owns `kh*kw*cin*cout + cout` parameters
//! (`cout` only when biased); a weighted fusion of `k` maps costs `k` MACs
//! per output element; normalization, activations, pooling, resampling,
//! gating and reductions cost nothing. Parameters used at several sites are
//! charged once, at their first use.

use std::fmt::Write as _;

use ef_tensor::{OpKind, Tape};

use crate::detector::Detector;
use crate::error::{Error, Result};

/// Top-level scopes of the detector, in forward order.
pub const SECTIONS: [&str; 5] = ["backbone", "inputs", "neck", "enhance", "head"];

#[derive(Clone, Debug, PartialEq)]
pub struct LayerEntry {
    pub scope: String,
    pub kind: String,
    pub detail: String,
    pub params: u64,
    pub macs: u64,
    pub out_shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SectionTotal {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexityReport {
    pub input: (usize, usize),
    pub layers: Vec<LayerEntry>,
    pub sections: Vec<SectionTotal>,
    /// Parts of the model whose cost could not be determined.
    pub uncounted: Vec<String>,
    pub total_params: u64,
    pub total_macs: u64,
}

impl ComplexityReport {
    pub fn section(&self, name: &str) -> Option<&SectionTotal> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scope", "kind", "detail", "params", "macs", "out_shape"])?;
        for l in &self.layers {
            let shape = l.out_shape.map(|d| d.to_string()).join("x");
            w.write_record([
                &l.scope,
                &l.kind,
                &l.detail,
                &l.params.to_string(),
                &l.macs.to_string(),
                &shape,
            ])?;
        }
        for u in &self.uncounted {
            w.write_record([u.as_str(), "uncounted", "", "", "", ""])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Human-readable per-section summary.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input {}x{}", self.input.0, self.input.1);
        let _ = writeln!(
            s,
            "{:<10} {:>14} {:>18} {:>10} {:>10}",
            "section", "params", "MACs", "Params(M)", "MACs(G)"
        );
        let mut row = |name: &str, p: u64, m: u64| {
            let _ = writeln!(
                s,
                "{name:<10} {p:>14} {m:>18} {:>10.4} {:>10.4}",
                p as f64 / 1e6,
                m as f64 / 1e9
            );
        };
        for sec in &self.sections {
            row(&sec.name, sec.params, sec.macs);
        }
        row("total", self.total_params, self.total_macs);
        for u in &self.uncounted {
            let _ = writeln!(s, "uncounted: {u}");
        }
        s
    }
}

/// Profiles `detector` on a single `height`x`width` image.
pub fn profile(detector: &Detector, height: usize, width: usize) -> Result<ComplexityReport> {
    let mut tape = Tape::dry(&detector.params);
    let x = tape.input_shape([1, 3, height, width]);
    detector.forward(&mut tape, x)?;
    let mut layers = Vec::with_capacity(tape.records().len());
    let mut sections: Vec<SectionTotal> = SECTIONS
        .iter()
        .map(|n| SectionTotal {
            name: n.to_string(),
            params: 0,
            macs: 0,
        })
        .collect();
    let mut uncounted = Vec::new();
    let backbone_counted = detector.backbone().is_profiled();
    if !backbone_counted {
        uncounted.push("backbone (external adapter without cost information)".to_string());
    }
    for r in tape.records() {
        let top = r.scope.split('.').next().unwrap_or("");
        if top == "backbone" && !backbone_counted {
            continue;
        }
        let sec = match sections.iter_mut().find(|s| s.name == top) {
            Some(s) => s,
            None => {
                sections.push(SectionTotal {
                    name: top.to_string(),
                    params: 0,
                    macs: 0,
                });
                sections.last_mut().expect("just pushed")
            }
        };
        sec.params += r.params;
        sec.macs += r.macs;
        layers.push(LayerEntry {
            scope: r.scope.clone(),
            kind: r.kind.as_str().to_string(),
            detail: r.detail.clone(),
            params: r.params,
            macs: r.macs,
            out_shape: r.out_shape,
        });
        if matches!(r.kind, OpKind::Conv | OpKind::Fusion) && r.macs == 0 {
            uncounted.push(format!("{} {}", r.scope, r.detail));
        }
    }
    let total_params = layers.iter().map(|l| l.params).sum();
    let total_macs = layers.iter().map(|l| l.macs).sum();
    if backbone_counted && total_params != detector.num_params() as u64 {
        uncounted.push(format!(
            "{} parameters never used in the forward pass",
            detector.num_params() as u64 - total_params
        ));
    }
    Ok(ComplexityReport {
        input: (height, width),
        layers,
        sections,
        uncounted,
        total_params,
        total_macs,
    })
}
