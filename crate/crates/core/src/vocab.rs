//! Fixed integer vocabulary for compositional referring expressions.

use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

/// Vocabulary capacity (embedding rows); ids above the defined words are
/// reserved.
pub const VOCAB_SIZE: usize = 32;

/// Maximum sentence length accepted by the text encoder.
pub const MAX_TEXT_LEN: usize = 77;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
    Orange,
    Purple,
}

pub const COLORS: [Color; 8] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Magenta,
    Color::Cyan,
    Color::Orange,
    Color::Purple,
];

impl Color {
    pub fn token(self) -> usize {
        3 + self as usize
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [230, 220, 50],
            Color::Magenta => [200, 60, 200],
            Color::Cyan => [60, 200, 220],
            Color::Orange => [240, 140, 40],
            Color::Purple => [130, 60, 200],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Magenta => "magenta",
            Color::Cyan => "cyan",
            Color::Orange => "orange",
            Color::Purple => "purple",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

impl ShapeKind {
    pub fn token(self) -> usize {
        11 + self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

pub const MOVING: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub fn token(self) -> usize {
        15 + self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }

    /// Dominant-axis direction of a velocity in (dx, dy) pixel units.
    pub fn from_velocity(vx: f64, vy: f64) -> Option<Direction> {
        if vx == 0.0 && vy == 0.0 {
            return None;
        }
        Some(if vx.abs() >= vy.abs() {
            if vx >= 0.0 {
                Direction::Right
            } else {
                Direction::Left
            }
        } else if vy >= 0.0 {
            Direction::Down
        } else {
            Direction::Up
        })
    }
}

/// Decoded attribute view of a token sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Expression {
    pub color: Option<Color>,
    pub shape: Option<ShapeKind>,
    pub direction: Option<Direction>,
}

/// Encode an expression as `[BOS, color?, shape?, (moving, dir)?, EOS]`.
pub fn encode_expression(
    color: Option<Color>,
    shape: Option<ShapeKind>,
    direction: Option<Direction>,
) -> Vec<usize> {
    let mut t = vec![BOS];
    if let Some(c) = color {
        t.push(c.token());
    }
    if let Some(s) = shape {
        t.push(s.token());
    }
    if let Some(d) = direction {
        t.push(MOVING);
        t.push(d.token());
    }
    t.push(EOS);
    t
}

/// Inverse of [`encode_expression`]; ignores PAD/BOS/EOS.
pub fn decode_expression(tokens: &[usize]) -> Expression {
    let mut e = Expression {
        color: None,
        shape: None,
        direction: None,
    };
    for &t in tokens {
        match t {
            3..=10 => e.color = Some(COLORS[t - 3]),
            11..=13 => e.shape = Some(SHAPES[t - 11]),
            15..=18 => {
                e.direction = Some(match t - 15 {
                    0 => Direction::Left,
                    1 => Direction::Right,
                    2 => Direction::Up,
                    _ => Direction::Down,
                })
            }
            _ => {}
        }
    }
    e
}

/// Human-readable form, for sidecar records and logs.
pub fn expression_text(tokens: &[usize]) -> String {
    let e = decode_expression(tokens);
    let mut parts: Vec<&str> = Vec::new();
    if let Some(c) = e.color {
        parts.push(c.name());
    }
    if let Some(s) = e.shape {
        parts.push(s.name());
    }
    let mut text = parts.join(" ");
    if let Some(d) = e.direction {
        text.push_str(" moving ");
        text.push_str(d.name());
    }
    text
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let t = encode_expression(
            Some(Color::Red),
            Some(ShapeKind::Circle),
            Some(Direction::Left),
        );
        let e = decode_expression(&t);
        assert_eq!(e.color, Some(Color::Red));
        assert_eq!(e.shape, Some(ShapeKind::Circle));
        assert_eq!(e.direction, Some(Direction::Left));
        assert_eq!(expression_text(&t), "red circle moving left");
    }

    #[test]
    fn tokens_within_vocab() {
        for c in COLORS {
            assert!(c.token() < VOCAB_SIZE);
        }
        for s in SHAPES {
            assert!(s.token() < VOCAB_SIZE);
        }
        assert!(Direction::Down.token() < VOCAB_SIZE);
    }

    #[test]
    fn dominant_axis_direction() {
        assert_eq!(Direction::from_velocity(2.0, 1.0), Some(Direction::Right));
        assert_eq!(Direction::from_velocity(-0.5, 0.2), Some(Direction::Left));
        assert_eq!(Direction::from_velocity(0.1, -3.0), Some(Direction::Up));
        assert_eq!(Direction::from_velocity(0.0, 0.0), None);
    }
}
