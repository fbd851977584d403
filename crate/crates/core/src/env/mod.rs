//! Desk-scale environments: a pixel pendulum and MiniGrid-style grid worlds.

mod grid;
mod pendulum;

pub use grid::{Cell, GridKind, GridWorld};
pub use pendulum::{PendulumState, PixelPendulum};

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// An `h×w×c` byte image, row-major with channels last.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Observation {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(
                "observation",
                format!("{} bytes for {height}x{width}x{channels}", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * self.channels + channel]
    }

    /// One channel as a grayscale plane.
    pub fn channel(&self, channel: usize) -> Vec<u8> {
        self.data.iter().skip(channel).step_by(self.channels).copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Continuous { dim: usize },
    Discrete { n: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Continuous(Vec<f32>),
    Discrete(usize),
}

#[derive(Clone, Debug)]
pub struct Step {
    pub observation: Observation,
    pub reward: f64,
    /// A true terminal state: no bootstrapping past it.
    pub terminated: bool,
    /// Episode cut by the time limit.
    pub truncated: bool,
    /// Some continuous action component was outside `[-1, 1]`.
    pub clamped: bool,
}

impl Step {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

pub trait Environment: Send {
    fn observation_shape(&self) -> [usize; 3];
    fn action_space(&self) -> ActionSpace;
    /// Physics steps per agent step.
    fn action_repeat(&self) -> usize {
        1
    }
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: &Action) -> Result<Step>;
    /// A grayscale picture of the current state for frame dumps.
    fn render(&self) -> (usize, usize, Vec<u8>);
}

/// Binary PGM (P5) with 8-bit samples.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape(
            "write_pgm",
            format!("{} pixels for {width}x{height}", pixels.len()),
        ));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{width} {height}\n255\n")?;
    f.write_all(pixels)?;
    f.flush()?;
    Ok(())
}

/// Environment ids understood by [`make`].
pub fn make(id: &str) -> Result<Box<dyn Environment>> {
    if id == "pendulum" {
        return Ok(Box::new(PixelPendulum::new()));
    }
    let parse = |prefix: &str| -> Option<usize> { id.strip_prefix(prefix)?.parse().ok() };
    if let Some(n) = parse("empty-") {
        return Ok(Box::new(GridWorld::new(GridKind::Empty, n)?));
    }
    if let Some(n) = parse("doorkey-") {
        return Ok(Box::new(GridWorld::new(GridKind::DoorKey, n)?));
    }
    Err(Error::Config(format!(
        "unknown env `{id}` (expected pendulum, empty-N or doorkey-N)"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn make_known_ids() {
        assert_eq!(make("pendulum").unwrap().observation_shape(), [48, 48, 3]);
        assert_eq!(make("empty-6").unwrap().observation_shape(), [7, 7, 3]);
        assert_eq!(make("doorkey-8").unwrap().action_space(), ActionSpace::Discrete { n: 7 });
        assert!(make("cartpole").is_err());
        assert!(make("empty-x").is_err());
    }

    #[test]
    fn pgm_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.pgm");
        write_pgm(&p, 2, 1, &[0, 255]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 255]);
        assert!(write_pgm(&p, 2, 2, &[0]).is_err());
    }
}
