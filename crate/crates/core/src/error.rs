use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("rotation angle too close to pi for the principal logarithm")]
    AngleAtPi,
    #[error("freedom basis is rank deficient")]
    RankDeficient,
    #[error("plane normal is degenerate")]
    DegeneratePlane,
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("disparity {disparity} px is below the triangulation threshold")]
    DisparityTooSmall { disparity: f64 },
    #[error("point set is degenerate for plane fitting")]
    Degenerate,
    #[error("RANSAC found no consensus set (best inlier count {best})")]
    NoConsensus { best: usize },
    #[error("insufficient points: got {got}, need {need}")]
    InsufficientPoints { got: usize, need: usize },
    #[error("optimization diverged after {iterations} iterations")]
    Diverged { iterations: usize },
    #[error("bundle adjustment window is empty")]
    EmptyWindow,
    #[error("reduced normal equations are singular")]
    SingularReducedSystem,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("trajectories share no associated timestamps")]
    NoOverlap,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("frame {frame}: {source}")]
    AtFrame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn at_frame(self, frame: usize) -> Self {
        Error::AtFrame {
            frame,
            source: Box::new(self),
        }
    }
}
