use std::fmt;

pub const NUM_CLASSES: usize = 6;
pub const NUM_LANDMARKS: usize = 68;
/// Width of the flattened landmark vector, `68 × (x, y)`.
pub const LANDMARK_DIM: usize = NUM_LANDMARKS * 2;

/// The six basic expressions, in label-file order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Expression {
    Anger = 0,
    Disgust = 1,
    Fear = 2,
    Happiness = 3,
    Sadness = 4,
    Surprise = 5,
}

impl Expression {
    pub const ALL: [Expression; NUM_CLASSES] = [
        Expression::Anger,
        Expression::Disgust,
        Expression::Fear,
        Expression::Happiness,
        Expression::Sadness,
        Expression::Surprise,
    ];

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Expression::Anger => "anger",
            Expression::Disgust => "disgust",
            Expression::Fear => "fear",
            Expression::Happiness => "happiness",
            Expression::Sadness => "sadness",
            Expression::Surprise => "surprise",
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}
