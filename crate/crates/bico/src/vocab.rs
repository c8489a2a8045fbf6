//! The fixed concept vocabulary: the discrete stand-in for text prompts.

use crate::error::{BicoError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Shape,
    Color,
    Motion,
    Background,
    Texture,
    Filler,
    Pad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

pub const ALL_SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorToken {
    Red,
    Yellow,
    Green,
    Cyan,
    Blue,
    Magenta,
}

pub const ALL_COLORS: [ColorToken; 6] = [
    ColorToken::Red,
    ColorToken::Yellow,
    ColorToken::Green,
    ColorToken::Cyan,
    ColorToken::Blue,
    ColorToken::Magenta,
];

impl ColorToken {
    /// Hue bucket center in degrees.
    pub fn bucket_center_deg(self) -> f64 {
        match self {
            ColorToken::Red => 0.0,
            ColorToken::Yellow => 60.0,
            ColorToken::Green => 120.0,
            ColorToken::Cyan => 180.0,
            ColorToken::Blue => 240.0,
            ColorToken::Magenta => 300.0,
        }
    }

    /// Nearest bucket for an arbitrary hue.
    pub fn nearest(hue_deg: f64) -> ColorToken {
        let h = hue_deg.rem_euclid(360.0);
        let idx = ((h + 30.0) / 60.0).floor() as i64 % 6;
        ALL_COLORS[idx as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    Left,
    Right,
    Up,
    Down,
    Static,
    BounceH,
    BounceV,
}

pub const ALL_MOTIONS: [MotionKind; 7] = [
    MotionKind::Left,
    MotionKind::Right,
    MotionKind::Up,
    MotionKind::Down,
    MotionKind::Static,
    MotionKind::BounceH,
    MotionKind::BounceV,
];

impl MotionKind {
    /// Unit direction in pixel coordinates (x right, y down). Zero for
    /// static; bounce motions give the initial direction along their axis.
    pub fn direction(self) -> (f64, f64) {
        match self {
            MotionKind::Left => (-1.0, 0.0),
            MotionKind::Right => (1.0, 0.0),
            MotionKind::Up => (0.0, -1.0),
            MotionKind::Down => (0.0, 1.0),
            MotionKind::Static => (0.0, 0.0),
            MotionKind::BounceH => (1.0, 0.0),
            MotionKind::BounceV => (0.0, 1.0),
        }
    }

    pub fn is_bounce(self) -> bool {
        matches!(self, MotionKind::BounceH | MotionKind::BounceV)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Black,
    White,
    Gray,
    Checker,
}

pub const ALL_BACKGROUNDS: [BackgroundKind; 4] = [
    BackgroundKind::Black,
    BackgroundKind::White,
    BackgroundKind::Gray,
    BackgroundKind::Checker,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Solid,
    Striped,
    Dotted,
}

pub const ALL_TEXTURES: [TextureKind; 3] =
    [TextureKind::Solid, TextureKind::Striped, TextureKind::Dotted];

pub const FILLER_SURFACES: [&str; 7] = ["a", "the", "on", "moving", "over", "scene", "with"];

#[derive(Debug, Clone)]
pub struct VocabEntry {
    pub id: u32,
    pub surface: String,
    pub category: Category,
}

/// Token ids dense in [0, V); exactly one PAD token; unique surfaces.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<VocabEntry>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}

impl Vocabulary {
    /// The fixed vocabulary every model in this crate is trained against.
    pub fn standard() -> Self {
        let mut entries = Vec::new();
        let mut push = |surface: &str, category: Category| {
            entries.push(VocabEntry {
                id: entries.len() as u32,
                surface: surface.to_string(),
                category,
            });
        };
        push("<pad>", Category::Pad);
        for s in FILLER_SURFACES {
            push(s, Category::Filler);
        }
        for s in ["circle", "square", "triangle"] {
            push(s, Category::Shape);
        }
        for s in ["red", "yellow", "green", "cyan", "blue", "magenta"] {
            push(s, Category::Color);
        }
        for s in ["left", "right", "up", "down", "static", "bounce_h", "bounce_v"] {
            push(s, Category::Motion);
        }
        for s in ["black", "white", "gray", "checker"] {
            push(s, Category::Background);
        }
        for s in ["solid", "striped", "dotted"] {
            push(s, Category::Texture);
        }
        Vocabulary { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn id_of(&self, surface: &str) -> Result<u32> {
        self.entries
            .iter()
            .find(|e| e.surface == surface)
            .map(|e| e.id)
            .ok_or_else(|| BicoError::UnknownToken {
                what: format!("surface `{surface}`"),
            })
    }

    pub fn surface_of(&self, id: u32) -> Result<&str> {
        self.entries
            .get(id as usize)
            .map(|e| e.surface.as_str())
            .ok_or_else(|| BicoError::UnknownToken {
                what: format!("id {id}"),
            })
    }

    pub fn category_of(&self, id: u32) -> Result<Category> {
        self.entries
            .get(id as usize)
            .map(|e| e.category)
            .ok_or_else(|| BicoError::UnknownToken {
                what: format!("id {id}"),
            })
    }

    pub fn is_concept(&self, id: u32) -> bool {
        matches!(
            self.category_of(id),
            Ok(Category::Shape)
                | Ok(Category::Color)
                | Ok(Category::Motion)
                | Ok(Category::Background)
                | Ok(Category::Texture)
        )
    }

    pub fn shape_id(&self, s: ShapeKind) -> u32 {
        let surface = match s {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        };
        self.id_of(surface).unwrap()
    }

    pub fn color_id(&self, c: ColorToken) -> u32 {
        let surface = match c {
            ColorToken::Red => "red",
            ColorToken::Yellow => "yellow",
            ColorToken::Green => "green",
            ColorToken::Cyan => "cyan",
            ColorToken::Blue => "blue",
            ColorToken::Magenta => "magenta",
        };
        self.id_of(surface).unwrap()
    }

    pub fn motion_id(&self, m: MotionKind) -> u32 {
        let surface = match m {
            MotionKind::Left => "left",
            MotionKind::Right => "right",
            MotionKind::Up => "up",
            MotionKind::Down => "down",
            MotionKind::Static => "static",
            MotionKind::BounceH => "bounce_h",
            MotionKind::BounceV => "bounce_v",
        };
        self.id_of(surface).unwrap()
    }

    pub fn background_id(&self, b: BackgroundKind) -> u32 {
        let surface = match b {
            BackgroundKind::Black => "black",
            BackgroundKind::White => "white",
            BackgroundKind::Gray => "gray",
            BackgroundKind::Checker => "checker",
        };
        self.id_of(surface).unwrap()
    }

    pub fn texture_id(&self, t: TextureKind) -> u32 {
        let surface = match t {
            TextureKind::Solid => "solid",
            TextureKind::Striped => "striped",
            TextureKind::Dotted => "dotted",
        };
        self.id_of(surface).unwrap()
    }

    pub fn filler_id(&self, surface: &str) -> u32 {
        debug_assert!(FILLER_SURFACES.contains(&surface));
        self.id_of(surface).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_dense_unique_one_pad() {
        let v = Vocabulary::standard();
        assert_eq!(v.len(), 1 + 7 + 3 + 6 + 7 + 4 + 3);
        let mut surfaces = std::collections::BTreeSet::new();
        for (i, e) in v.entries().iter().enumerate() {
            assert_eq!(e.id as usize, i);
            assert!(surfaces.insert(e.surface.clone()), "dup {}", e.surface);
        }
        let pads = v
            .entries()
            .iter()
            .filter(|e| e.category == Category::Pad)
            .count();
        assert_eq!(pads, 1);
    }

    #[test]
    fn nearest_bucket_wraps() {
        assert_eq!(ColorToken::nearest(0.0), ColorToken::Red);
        assert_eq!(ColorToken::nearest(20.0), ColorToken::Red);
        assert_eq!(ColorToken::nearest(340.0), ColorToken::Red);
        assert_eq!(ColorToken::nearest(59.0), ColorToken::Yellow);
        assert_eq!(ColorToken::nearest(299.0), ColorToken::Magenta);
    }
}
