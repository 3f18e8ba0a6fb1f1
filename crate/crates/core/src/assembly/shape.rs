use std::fmt;

use serde::{Deserialize, Serialize};

/// Output size of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    Vector { units: usize },
    Image { channels: usize, height: usize, width: usize },
}

impl Shape {
    pub fn vector(units: usize) -> Self {
        Shape::Vector { units }
    }

    pub fn image(channels: usize, height: usize, width: usize) -> Self {
        Shape::Image { channels, height, width }
    }

    pub fn elements(&self) -> usize {
        match *self {
            Shape::Vector { units } => units,
            Shape::Image { channels, height, width } => channels * height * width,
        }
    }

    pub fn is_image(&self) -> bool {
        matches!(self, Shape::Image { .. })
    }

    pub fn flattened(&self) -> Self {
        Shape::Vector { units: self.elements() }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Vector { units } => write!(f, "{units}"),
            Shape::Image { channels, height, width } => write!(f, "{channels}x{height}x{width}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_counts() {
        assert_eq!(Shape::vector(7).elements(), 7);
        assert_eq!(Shape::image(3, 32, 32).elements(), 3072);
        assert_eq!(Shape::image(3, 2, 2).flattened(), Shape::vector(12));
        assert_eq!(Shape::image(16, 8, 4).to_string(), "16x8x4");
    }
}
