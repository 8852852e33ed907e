use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::series::FieldSeries;
use crate::emulator::LandMask;
use crate::error::{CoreError, Result};

/// Half-open cell rectangle `[row0, row1) × [col0, col1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl Rect {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Self {
        Rect {
            row0,
            col0,
            row1,
            col1,
        }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }

    pub fn is_empty(&self) -> bool {
        self.row0 >= self.row1 || self.col0 >= self.col1
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        !self.is_empty() && self.row1 <= h && self.col1 <= w
    }
}

/// Remote coupling: the mean of `source` at `t − lag + 1` drives every `dest` cell at `t + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teleconnection {
    pub source: Rect,
    pub dest: Rect,
    pub coupling: f64,
    pub lag: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    #[default]
    AllOcean,
    /// Listed rectangles are land.
    Land { rects: Vec<Rect> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid: (usize, usize),
    pub months: usize,
    pub seed: u64,
    /// Per-month persistence `α ∈ (0, 1)`.
    pub persistence: f64,
    /// Euclidean radius (cells) of the uniform local blur applied every month.
    pub radius: f64,
    pub noise: f64,
    /// Euclidean radius (cells) of the uniform blur applied to each month's innovation; 0 keeps it white.
    #[serde(default)]
    pub noise_radius: f64,
    #[serde(default)]
    pub links: Vec<Teleconnection>,
    #[serde(default)]
    pub mask: MaskSpec,
    /// Months simulated and discarded before the first stored frame.
    #[serde(default = "default_spinup")]
    pub spinup: usize,
}

fn default_spinup() -> usize {
    120
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: (24, 40),
            months: 600,
            seed: 0,
            persistence: 0.9,
            radius: 1.0,
            noise: 0.3,
            noise_radius: 0.0,
            links: Vec::new(),
            mask: MaskSpec::AllOcean,
            spinup: default_spinup(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        if h == 0 || w == 0 || self.months == 0 {
            return Err(CoreError::invalid(
                "synthetic grid and month count must be >= 1",
            ));
        }
        if !(self.persistence > 0.0 && self.persistence < 1.0) {
            return Err(CoreError::invalid("persistence must lie in (0, 1)"));
        }
        if !(self.radius >= 0.0) || !(self.noise >= 0.0) || !(self.noise_radius >= 0.0) {
            return Err(CoreError::invalid(
                "radius, noise and noise_radius must be >= 0",
            ));
        }
        for link in &self.links {
            if link.lag == 0 {
                return Err(CoreError::invalid("teleconnection lag must be >= 1"));
            }
            if !link.source.fits(h, w) || !link.dest.fits(h, w) {
                return Err(CoreError::invalid("teleconnection rectangle outside grid"));
            }
        }
        if let MaskSpec::Land { rects } = &self.mask {
            if rects.iter().any(|r| !r.fits(h, w)) {
                return Err(CoreError::invalid("land rectangle outside grid"));
            }
        }
        Ok(())
    }

    pub fn land_mask(&self) -> Result<LandMask> {
        let (h, w) = self.grid;
        match &self.mask {
            MaskSpec::AllOcean => Ok(LandMask::all_ocean(h, w)),
            MaskSpec::Land { rects } => {
                let cells = (0..h * w)
                    .map(|i| !rects.iter().any(|r| r.contains(i / w, i % w)))
                    .collect();
                LandMask::new(h, w, cells)
            }
        }
    }
}

/// Neighbour offsets within Euclidean distance `radius`.
fn stencil(radius: f64) -> Vec<(isize, isize)> {
    let r = radius.floor() as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= radius * radius {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Simulate `s_{t+1} = α·blur(s_t) + Σ β·mean_src(s_{t−lag+1}) + noise` on ocean cells.
pub fn generate_synthetic(config: &SynthConfig) -> Result<FieldSeries> {
    config.validate()?;
    let (h, w) = config.grid;
    let n = h * w;
    let mask = config.land_mask()?;
    let ocean = mask.cells().to_vec();
    let offsets = stencil(config.radius);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let neighbourhood = |offsets: &[(isize, isize)]| -> Vec<Vec<usize>> {
        (0..n)
            .map(|i| {
                let (r, c) = ((i / w) as isize, (i % w) as isize);
                offsets
                    .iter()
                    .filter_map(|&(dy, dx)| {
                        let (rr, cc) = (r + dy, c + dx);
                        (rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w)
                            .then(|| rr as usize * w + cc as usize)
                            .filter(|&j| ocean[j])
                    })
                    .collect()
            })
            .collect()
    };
    let neighbours = neighbourhood(&offsets);
    let noise_neighbours = neighbourhood(&stencil(config.noise_radius));

    let max_lag = config.links.iter().map(|l| l.lag).max().unwrap_or(1);
    let total = config.spinup + config.months;
    let mut out: Vec<f32> = Vec::with_capacity(config.months * n);
    let mut ring: VecDeque<Vec<f64>> = VecDeque::with_capacity(max_lag + 1);
    let first: Vec<f64> = (0..n)
        .map(|i| {
            if ocean[i] {
                config.noise * normal.sample(&mut rng)
            } else {
                0.0
            }
        })
        .collect();
    if config.spinup == 0 {
        out.extend(first.iter().map(|&v| v as f32));
    }
    ring.push_back(first);
    for step in 1..total {
        let state = ring.back().expect("non-empty history");
        let white: Vec<f64> = (0..n)
            .map(|i| {
                if ocean[i] {
                    normal.sample(&mut rng)
                } else {
                    0.0
                }
            })
            .collect();
        let mut next = vec![0.0; n];
        for i in 0..n {
            if !ocean[i] {
                continue;
            }
            let nb = &neighbours[i];
            let blur = nb.iter().map(|&j| state[j]).sum::<f64>() / nb.len() as f64;
            let nn = &noise_neighbours[i];
            let shock = nn.iter().map(|&j| white[j]).sum::<f64>() / nn.len() as f64;
            next[i] = config.persistence * blur + config.noise * shock;
        }
        for link in &config.links {
            if ring.len() < link.lag {
                continue;
            }
            let src = &ring[ring.len() - link.lag];
            let cells: Vec<usize> = (0..n)
                .filter(|&i| ocean[i] && link.source.contains(i / w, i % w))
                .collect();
            if cells.is_empty() {
                continue;
            }
            let drive =
                link.coupling * cells.iter().map(|&i| src[i]).sum::<f64>() / cells.len() as f64;
            for (i, v) in next.iter_mut().enumerate() {
                if ocean[i] && link.dest.contains(i / w, i % w) {
                    *v += drive;
                }
            }
        }
        if step >= config.spinup {
            out.extend(next.iter().map(|&v| v as f32));
        }
        ring.push_back(next);
        if ring.len() > max_lag {
            ring.pop_front();
        }
    }
    let mut series = FieldSeries::new(config.months, h, w, out, Some(mask))?;
    series.name = "synthetic".into();
    series.provenance = format!(
        "synthetic(seed={}, alpha={}, radius={}, noise={}, links={})",
        config.seed,
        config.persistence,
        config.radius,
        config.noise,
        config.links.len()
    );
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            grid: (8, 10),
            months: 50,
            seed,
            spinup: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_synthetic(&small(5)).unwrap();
        let b = generate_synthetic(&small(5)).unwrap();
        let c = generate_synthetic(&small(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.values(), c.values());
        assert_eq!(a.months(), 50);
    }

    #[test]
    fn noiseless_low_persistence_decays() {
        let cfg = SynthConfig {
            persistence: 1e-3,
            noise: 0.0,
            spinup: 0,
            ..small(1)
        };
        let s = generate_synthetic(&cfg).unwrap();
        assert!(s.frame(49).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_step_dependence_is_local() {
        // From a single impulse with no noise, one step reaches only the stencil.
        let cfg = SynthConfig {
            grid: (9, 9),
            months: 2,
            noise: 0.0,
            spinup: 0,
            ..SynthConfig::default()
        };
        let offsets = stencil(cfg.radius);
        assert_eq!(offsets.len(), 5);
        let mut impulse = vec![0.0; 81];
        impulse[4 * 9 + 4] = 1.0;
        let nb: Vec<usize> = offsets
            .iter()
            .map(|&(dy, dx)| ((4 + dy) * 9 + 4 + dx) as usize)
            .collect();
        let next: Vec<f64> = (0..81)
            .map(|i| {
                let (r, c) = ((i / 9) as isize, (i % 9) as isize);
                let cells: Vec<usize> = offsets
                    .iter()
                    .filter_map(|&(dy, dx)| {
                        let (rr, cc) = (r + dy, c + dx);
                        (rr >= 0 && cc >= 0 && rr < 9 && cc < 9).then(|| (rr * 9 + cc) as usize)
                    })
                    .collect();
                cells.iter().map(|&j| impulse[j]).sum::<f64>() / cells.len() as f64
            })
            .collect();
        for i in 0..81 {
            assert_eq!(next[i] != 0.0, nb.contains(&i), "cell {i}");
        }
        assert!(generate_synthetic(&cfg).is_ok());
    }

    #[test]
    fn land_is_held_at_zero() {
        let cfg = SynthConfig {
            mask: MaskSpec::Land {
                rects: vec![Rect::new(0, 0, 3, 3)],
            },
            ..small(2)
        };
        let s = generate_synthetic(&cfg).unwrap();
        let m = s.mask.clone().unwrap();
        for t in 0..s.months() {
            for (v, &o) in s.frame(t).iter().zip(m.cells()) {
                if !o {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_synthetic(&SynthConfig {
            persistence: 1.0,
            ..small(0)
        })
        .is_err());
        assert!(generate_synthetic(&SynthConfig {
            radius: -1.0,
            ..small(0)
        })
        .is_err());
        let bad_link = Teleconnection {
            source: Rect::new(0, 0, 2, 2),
            dest: Rect::new(4, 4, 6, 6),
            coupling: 0.5,
            lag: 0,
        };
        assert!(generate_synthetic(&SynthConfig {
            links: vec![bad_link],
            ..small(0)
        })
        .is_err());
    }

    #[test]
    fn teleconnection_drives_destination() {
        let link = Teleconnection {
            source: Rect::new(0, 0, 2, 2),
            dest: Rect::new(6, 8, 8, 10),
            coupling: 0.8,
            lag: 3,
        };
        let cfg = SynthConfig {
            links: vec![link],
            months: 2000,
            radius: 0.0,
            persistence: 0.3,
            ..small(9)
        };
        let s = generate_synthetic(&cfg).unwrap();
        // correlate source mean at t with destination at t + 3
        let src: Vec<f64> = (0..s.months())
            .map(|t| {
                [0usize, 1, 10, 11]
                    .iter()
                    .map(|&i| s.frame(t)[i] as f64)
                    .sum::<f64>()
                    / 4.0
            })
            .collect();
        let dst: Vec<f64> = (0..s.months())
            .map(|t| s.frame(t)[7 * 10 + 9] as f64)
            .collect();
        let r = crate::stats::pearson(&src[..s.months() - 3], &dst[3..]).unwrap();
        assert!(r > 0.3, "r = {r}");
    }
}
