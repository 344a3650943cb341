use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::params::{ParamKind, ParamStore};

pub const COMPONENTS: [(&str, &str); 5] = [
    ("sam.image_encoder", "Image encoder (incl. adapters)"),
    ("sam.prompt_encoder", "Prompt encoder"),
    ("sam.mask_decoder", "Mask decoder"),
    ("clip.visual", "CLIP vision encoder"),
    ("clip.text", "CLIP text encoder"),
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub total_count: u64,
    pub trainable_count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub entries: Vec<ParamEntry>,
    pub total_count: u64,
    pub trainable_count: u64,
    /// Regular plus semantic adapter parameters (already inside the image-encoder entry).
    pub adapter_count: u64,
    /// `adapter_count` relative to the image encoder without adapters, in percent.
    pub adapter_overhead_pct: f64,
}

pub fn is_adapter(name: &str) -> bool {
    name.contains(".adapter.") || name.contains(".semantic_adapter.")
}

/// Counts weights (buffers excluded) per top-level component.
pub fn count_parameters(store: &ParamStore, trainable: impl Fn(&str) -> bool) -> ParamReport {
    let mut entries: Vec<ParamEntry> = COMPONENTS
        .iter()
        .map(|(prefix, _)| ParamEntry { name: prefix.to_string(), total_count: 0, trainable_count: 0 })
        .collect();
    let mut adapter_count = 0u64;
    for (name, shape, kind) in store.shapes() {
        if kind != ParamKind::Weight {
            continue;
        }
        let n: u64 = shape.iter().map(|&d| d as u64).product();
        let idx = COMPONENTS
            .iter()
            .position(|(p, _)| name.starts_with(&format!("{p}.")))
            .unwrap_or_else(|| {
                entries.push(ParamEntry { name: "other".into(), total_count: 0, trainable_count: 0 });
                entries.len() - 1
            });
        entries[idx].total_count += n;
        if trainable(&name) {
            entries[idx].trainable_count += n;
        }
        if is_adapter(&name) {
            adapter_count += n;
        }
    }
    let total_count = entries.iter().map(|e| e.total_count).sum();
    let trainable_count = entries.iter().map(|e| e.trainable_count).sum();
    let backbone = entries[0].total_count.saturating_sub(adapter_count);
    let adapter_overhead_pct = if backbone > 0 { 100.0 * adapter_count as f64 / backbone as f64 } else { 0.0 };
    ParamReport { entries, total_count, trainable_count, adapter_count, adapter_overhead_pct }
}

impl ParamReport {
    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn sum(&self, names: &[&str]) -> (u64, u64) {
        names.iter().filter_map(|n| self.entry(n)).fold((0, 0), |(t, r), e| (t + e.total_count, r + e.trainable_count))
    }

    /// Segmentation model total and trainable counts.
    pub fn sam(&self) -> (u64, u64) {
        self.sum(&["sam.image_encoder", "sam.prompt_encoder", "sam.mask_decoder"])
    }

    /// Segmentation model without adapters: encoder backbone, prompt encoder and decoder.
    pub fn sam_base(&self) -> u64 {
        self.sam().0 - self.adapter_count
    }

    /// Everything except the text encoder, whose class embeddings are cached.
    pub fn deployment(&self) -> u64 {
        self.total_count - self.entry("clip.text").map_or(0, |e| e.total_count)
    }

    /// Millions, in the row order of the usual parameter table.
    pub fn table(&self) -> String {
        let m = |x: u64| x as f64 / 1e6;
        let mut out = String::new();
        let _ = writeln!(out, "{:<36} {:>10} {:>14}", "Component", "Total (M)", "Trainable (M)");
        let (st, sr) = self.sam();
        let _ = writeln!(out, "{:<36} {:>10.2} {:>14.2}", "SAM overall", m(st), m(sr));
        for (prefix, label) in COMPONENTS {
            let e = self.entry(prefix).expect("component entry");
            if prefix.starts_with("clip.") {
                let _ = writeln!(out, "{:<36} {:>10.2} {:>14.2}", label, m(e.total_count), m(e.trainable_count));
            } else {
                let _ = writeln!(out, "  {:<34} {:>10.2} {:>14.2}", label, m(e.total_count), m(e.trainable_count));
            }
        }
        let _ = writeln!(out, "{:<36} {:>10.2} {:>14.2}", "Full system", m(self.total_count), m(self.trainable_count));
        let _ = writeln!(out, "{:<36} {:>10.2}", "Deployment (text embeddings cached)", m(self.deployment()));
        let _ = writeln!(
            out,
            "Adapter overhead: {:.2}M ({:.1}% of the image encoder without adapters)",
            m(self.adapter_count),
            self.adapter_overhead_pct
        );
        out
    }
}
