//! Crop augmentation and the pixel-overlap view selector.

use rand::Rng;

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Placement of a `target` window inside a `source` frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CropSpec {
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub offset: (usize, usize),
}

impl CropSpec {
    pub fn new(source: (usize, usize), target: (usize, usize), offset: (usize, usize)) -> Result<Self> {
        if offset.0 + target.0 > source.0 || offset.1 + target.1 > source.1 {
            return Err(Error::invalid(format!(
                "crop {target:?} at {offset:?} does not fit in {source:?}"
            )));
        }
        Ok(Self {
            source,
            target,
            offset,
        })
    }

    fn check_fits(source: (usize, usize), target: (usize, usize)) -> Result<()> {
        if target.0 > source.0 || target.1 > source.1 || target.0 == 0 || target.1 == 0 {
            return Err(Error::invalid(format!(
                "crop target {target:?} must be non-empty and fit in source {source:?}"
            )));
        }
        Ok(())
    }

    /// Offsets drawn uniformly over every valid placement.
    pub fn random(source: (usize, usize), target: (usize, usize), rng: &mut impl Rng) -> Result<Self> {
        Self::check_fits(source, target)?;
        let r = rng.random_range(0..=source.0 - target.0);
        let c = rng.random_range(0..=source.1 - target.1);
        Self::new(source, target, (r, c))
    }

    pub fn centered(source: (usize, usize), target: (usize, usize)) -> Result<Self> {
        Self::check_fits(source, target)?;
        Self::new(
            source,
            target,
            ((source.0 - target.0) / 2, (source.1 - target.1) / 2),
        )
    }

    /// The whole frame, used for inputs that are never augmented.
    pub fn identity(source: (usize, usize)) -> Self {
        Self {
            source,
            target: source,
            offset: (0, 0),
        }
    }
}

/// Copies the window of `obs` selected by `spec`, all channels alike.
pub fn crop(obs: &Observation, spec: &CropSpec) -> Result<Observation> {
    check_source(obs, spec)?;
    let (th, tw) = spec.target;
    let c = obs.channels;
    let mut data = Vec::with_capacity(th * tw * c);
    for r in 0..th {
        let start = ((spec.offset.0 + r) * obs.width + spec.offset.1) * c;
        data.extend_from_slice(&obs.data[start..start + tw * c]);
    }
    Observation::new(th, tw, c, data)
}

fn check_source(obs: &Observation, spec: &CropSpec) -> Result<()> {
    if (obs.height, obs.width) != spec.source {
        return Err(Error::shape(
            "crop",
            format!(
                "observation is {}x{}, crop expects {:?}",
                obs.height, obs.width, spec.source
            ),
        ));
    }
    Ok(())
}

pub fn random_crop(
    obs: &Observation,
    target: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(Observation, CropSpec)> {
    let spec = CropSpec::random((obs.height, obs.width), target, rng)?;
    Ok((crop(obs, &spec)?, spec))
}

pub fn center_crop(obs: &Observation, target: (usize, usize)) -> Result<Observation> {
    let spec = CropSpec::centered((obs.height, obs.width), target)?;
    crop(obs, &spec)
}

/// Crops every observation with its own spec into one `[B, h, w, c]` tensor,
/// multiplying raw byte values by `scale`.
pub fn stack_views<R: Real>(obs: &[&Observation], specs: &[CropSpec], scale: R) -> Result<Tensor<R>> {
    if obs.len() != specs.len() || obs.is_empty() {
        return Err(Error::invalid(format!(
            "{} observations for {} crop specs",
            obs.len(),
            specs.len()
        )));
    }
    let (th, tw) = specs[0].target;
    let c = obs[0].channels;
    let mut data = Vec::with_capacity(obs.len() * th * tw * c);
    for (o, spec) in obs.iter().zip(specs) {
        check_source(o, spec)?;
        if spec.target != (th, tw) || o.channels != c {
            return Err(Error::shape("stack_views", "views differ in size or channels"));
        }
        for r in 0..th {
            let start = ((spec.offset.0 + r) * o.width + spec.offset.1) * c;
            data.extend(o.data[start..start + tw * c].iter().map(|&v| R::lit(v as f64) * scale));
        }
    }
    Tensor::new(&[obs.len(), th, tw, c], data)
}

/// Shared area of two crop windows as a fraction of the window area.
pub fn pixel_overlap(a: &CropSpec, b: &CropSpec) -> Result<f64> {
    if a.source != b.source || a.target != b.target {
        return Err(Error::invalid(format!(
            "overlap needs matching geometry, got {:?}->{:?} and {:?}->{:?}",
            a.source, a.target, b.source, b.target
        )));
    }
    let (th, tw) = a.target;
    let rows = th.saturating_sub(a.offset.0.abs_diff(b.offset.0));
    let cols = tw.saturating_sub(a.offset.1.abs_diff(b.offset.1));
    Ok((rows * cols) as f64 / (th * tw) as f64)
}

/// The pair `i < j` with the least overlap; ties go to the smallest pair.
pub fn select_min_overlap(specs: &[CropSpec]) -> Result<(usize, usize)> {
    if specs.len() < 2 {
        return Err(Error::invalid(format!(
            "selection needs at least 2 views, got {}",
            specs.len()
        )));
    }
    let mut best = (0, 1);
    let mut best_overlap = f64::INFINITY;
    for i in 0..specs.len() {
        for j in i + 1..specs.len() {
            let o = pixel_overlap(&specs[i], &specs[j])?;
            if o < best_overlap {
                best_overlap = o;
                best = (i, j);
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn frame(h: usize, w: usize, c: usize) -> Observation {
        let data = (0..h * w * c).map(|i| (i * 7 % 251) as u8).collect();
        Observation::new(h, w, c, data).unwrap()
    }

    #[test]
    fn offsets_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut rows = [0u32; 9];
        let mut cols = [0u32; 9];
        let n = 100_000;
        for _ in 0..n {
            let s = CropSpec::random((48, 48), (40, 40), &mut rng).unwrap();
            rows[s.offset.0] += 1;
            cols[s.offset.1] += 1;
        }
        let crit = ChiSquared::new(8.0).unwrap().inverse_cdf(0.99);
        for counts in [rows, cols] {
            let e = n as f64 / 9.0;
            let stat: f64 = counts.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
            assert!(stat < crit, "chi-square {stat} >= {crit}");
        }
    }

    #[test]
    fn crop_is_exact_subwindow() {
        let obs = frame(48, 48, 3);
        let spec = CropSpec::new((48, 48), (40, 40), (3, 6)).unwrap();
        let v = crop(&obs, &spec).unwrap();
        for r in 0..40 {
            for c in 0..40 {
                for ch in 0..3 {
                    assert_eq!(v.get(r, c, ch), obs.get(r + 3, c + 6, ch));
                }
            }
        }
    }

    #[test]
    fn same_size_is_identity() {
        let obs = frame(40, 40, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (v, spec) = random_crop(&obs, (40, 40), &mut rng).unwrap();
        assert_eq!(spec.offset, (0, 0));
        assert_eq!(v, obs);
        assert_eq!(center_crop(&obs, (40, 40)).unwrap(), obs);
    }

    #[test]
    fn oversized_target_rejected() {
        let obs = frame(40, 40, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(random_crop(&obs, (48, 48), &mut rng).is_err());
        assert!(center_crop(&obs, (41, 40)).is_err());
    }

    #[test]
    fn center_offset() {
        let spec = CropSpec::centered((48, 48), (40, 40)).unwrap();
        assert_eq!(spec.offset, (4, 4));
        let obs = frame(48, 48, 3);
        assert_eq!(center_crop(&obs, (40, 40)).unwrap(), crop(&obs, &spec).unwrap());
    }

    #[test]
    fn overlap_examples() {
        let s = |r, c| CropSpec::new((48, 48), (40, 40), (r, c)).unwrap();
        assert_eq!(pixel_overlap(&s(2, 3), &s(2, 3)).unwrap(), 1.0);
        // brute-force count of shared pixels
        let (a, b) = (s(0, 0), s(4, 4));
        let mut shared = 0;
        for r in 0..48 {
            for c in 0..48 {
                let in_a = r < 40 && c < 40;
                let in_b = (4..44).contains(&r) && (4..44).contains(&c);
                shared += (in_a && in_b) as usize;
            }
        }
        assert_eq!(shared, 36 * 36);
        assert!((pixel_overlap(&a, &b).unwrap() - 0.81).abs() < 1e-12);
        let d = |r, c| CropSpec::new((20, 20), (5, 5), (r, c)).unwrap();
        assert_eq!(pixel_overlap(&d(0, 0), &d(10, 10)).unwrap(), 0.0);
        let other = CropSpec::new((48, 48), (30, 30), (0, 0)).unwrap();
        assert!(pixel_overlap(&a, &other).is_err());
    }

    #[test]
    fn min_overlap_selection() {
        let s = |r, c| CropSpec::new((20, 20), (5, 5), (r, c)).unwrap();
        assert_eq!(select_min_overlap(&[s(0, 0), s(0, 0)]).unwrap(), (0, 1));
        assert_eq!(
            select_min_overlap(&[s(0, 0), s(1, 1), s(2, 2), s(15, 15)]).unwrap(),
            (0, 3)
        );
        assert!(select_min_overlap(&[s(0, 0)]).is_err());
    }

    #[test]
    fn stacked_views_match_crops() {
        let obs = [frame(48, 48, 3), frame(48, 48, 3)];
        let specs = [
            CropSpec::new((48, 48), (40, 40), (0, 8)).unwrap(),
            CropSpec::new((48, 48), (40, 40), (8, 1)).unwrap(),
        ];
        let t: Tensor<f32> = stack_views(&[&obs[0], &obs[1]], &specs, 1.0).unwrap();
        assert_eq!(t.shape(), &[2, 40, 40, 3]);
        let c1 = crop(&obs[1], &specs[1]).unwrap();
        let expect: Vec<f32> = c1.data.iter().map(|&v| v as f32).collect();
        assert_eq!(t.row(1), &expect[..]);
    }
}
