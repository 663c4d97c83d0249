//! Colour palettes for rule text. None of them uses a hue that reads as a
//! verdict (green for grant, bright red for deny).

use serde::{Deserialize, Serialize};

use super::ExplainError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    pub id: String,
    pub colors: Vec<String>,
}

const VIVID6: [&str; 6] = ["#1F6FEB", "#F28C00", "#9B30FF", "#00B3C7", "#E0218A", "#C9A400"];

impl Palette {
    pub const DEFAULT_ID: &'static str = "vivid6";

    pub fn by_id(id: &str) -> Result<Palette, ExplainError> {
        match id {
            "vivid6" => Ok(Palette {
                id: id.into(),
                colors: VIVID6.iter().map(|s| s.to_string()).collect(),
            }),
            other => Err(ExplainError::UnknownPalette(other.into())),
        }
    }

    pub fn color(&self, i: usize) -> &str {
        &self.colors[i % self.colors.len()]
    }
}

/// Hue in degrees, saturation and value of a `#RRGGBB` colour.
pub fn hsv(hex: &str) -> Option<(f64, f64, f64)> {
    let h = hex.strip_prefix('#')?;
    if h.len() != 6 {
        return None;
    }
    let c = |i: usize| u8::from_str_radix(&h[i..i + 2], 16).ok().map(|v| v as f64 / 255.0);
    let (r, g, b) = (c(0)?, c(2)?, c(4)?);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let hue = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / d).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { d / max };
    Some((hue, sat, max))
}

/// Green, or a saturated bright red.
pub fn is_verdict_color(hex: &str) -> bool {
    let Some((h, s, v)) = hsv(hex) else {
        return false;
    };
    let green = (75.0..=165.0).contains(&h) && s > 0.25;
    let red = !(20.0..=340.0).contains(&h) && s > 0.5 && v > 0.5;
    green || red
}
