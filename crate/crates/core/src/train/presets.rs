use crate::model::LayerSpec;
use crate::pattern::Window;

/// A named per-layer window schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationPreset {
    pub name: &'static str,
    pub heads: usize,
    pub layers: Vec<LayerSpec>,
}

impl AblationPreset {
    /// Full window `w = 2h` of every layer (layer-level value).
    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.window.width()).collect()
    }

    /// Number of heads with dilation above 1 in each layer.
    pub fn dilated_heads(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.head_windows(self.heads).iter().filter(|w| w.dilation > 1).count())
            .collect()
    }
}

fn round_even(x: f64) -> usize {
    2 * (x / 2.0).round() as usize
}

/// Full widths growing geometrically from `lo` (layer 0) to `hi` (top
/// layer), each rounded to the nearest even number.
pub fn geometric_widths(layers: usize, lo: usize, hi: usize) -> Vec<usize> {
    if layers == 1 {
        return vec![round_even(lo as f64)];
    }
    let ratio = hi as f64 / lo as f64;
    (0..layers)
        .map(|l| round_even(lo as f64 * ratio.powf(l as f64 / (layers - 1) as f64)))
        .collect()
}

fn from_widths(widths: &[usize]) -> Vec<LayerSpec> {
    widths.iter().map(|&w| LayerSpec::new(w / 2, 1)).collect()
}

/// Adds dilation `d` on heads `0` and `1` of the layers given as
/// `(layer, d)` pairs.
fn dilate_two_heads(mut layers: Vec<LayerSpec>, heads: usize, plan: &[(usize, usize)]) -> Vec<LayerSpec> {
    for &(l, d) in plan {
        let base = layers[l].window;
        let mut per_head = vec![base; heads];
        per_head[0] = Window::new(base.half_window, d);
        per_head[1] = Window::new(base.half_window, d);
        layers[l].per_head = per_head;
    }
    layers
}

/// Window schedules for the layer-ablation experiments.
///
/// The 12-layer, 8-head versions use the published settings: increasing
/// widths 32 → 512, a fixed width of 230, decreasing 512 → 32, and the
/// increasing schedule with dilation on two heads of the upper layers
/// (gaps 1, 2, 3 on layers 6–7, 8–9, 10–11, i.e. `d` = 2, 3, 4). The
/// `desk-` versions keep the shapes at 4 layers and 4 heads with widths
/// divided by four.
pub fn ablation_presets() -> Vec<AblationPreset> {
    let inc = geometric_widths(12, 32, 512);
    let dec: Vec<usize> = inc.iter().rev().copied().collect();
    let gaps: Vec<(usize, usize)> = (6..12).map(|l| (l, (l - 6) / 2 + 2)).collect();
    let desk_inc = geometric_widths(4, 8, 128);
    let desk_dec: Vec<usize> = desk_inc.iter().rev().copied().collect();
    vec![
        AblationPreset {
            name: "increasing",
            heads: 8,
            layers: from_widths(&inc),
        },
        AblationPreset {
            name: "fixed",
            heads: 8,
            layers: from_widths(&[230; 12]),
        },
        AblationPreset {
            name: "decreasing",
            heads: 8,
            layers: from_widths(&dec),
        },
        AblationPreset {
            name: "dilation",
            heads: 8,
            layers: dilate_two_heads(from_widths(&inc), 8, &gaps),
        },
        AblationPreset {
            name: "desk-increasing",
            heads: 4,
            layers: from_widths(&desk_inc),
        },
        AblationPreset {
            name: "desk-fixed",
            heads: 4,
            layers: from_widths(&[58; 4]),
        },
        AblationPreset {
            name: "desk-decreasing",
            heads: 4,
            layers: from_widths(&desk_dec),
        },
        AblationPreset {
            name: "desk-dilation",
            heads: 4,
            layers: dilate_two_heads(from_widths(&desk_inc), 4, &[(2, 2), (3, 3)]),
        },
    ]
}

pub fn preset(name: &str) -> Option<AblationPreset> {
    ablation_presets().into_iter().find(|p| p.name == name)
}
